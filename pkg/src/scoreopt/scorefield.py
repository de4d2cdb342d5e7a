"""Time-conditioned vector field: training, score conversions, sampling.

The model regresses v(x_t, t) onto the conditional velocity of the forward
process (dalpha*x + dsigma*eps) over fitness-resampled batches.  Scores,
posterior means, and the sigma-scaled score used by the stable gradient are
algebraic functions of v; analytic Gaussian-mixture oracles provide exact
references for all of them in tests.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .sampling import FitnessPool, resample_indices
from .schedule import DegenerateKernelError, Interpolant, linear_interpolant

_MAGIC = b"SOVF1\n"


class TrainingDivergedError(RuntimeError):
    """Loss became non-finite during training."""


# ---------------------------------------------------------------------------
# architecture


def time_embedding(t, n_freqs: int = 32, freq_min: float = 0.25,
                   freq_max: float = 8.0) -> np.ndarray:
    """Sinusoidal embedding of log t at log-spaced frequencies.

    Embedding log t (not t) makes a geometric step t -> gamma*t shift the
    embedding by the same small amount at every scale, so warm-starting the
    next scale perturbs the conditioning input uniformly little.
    """
    freqs = np.logspace(np.log10(freq_min), np.log10(freq_max), n_freqs)
    u = np.log(np.maximum(np.asarray(t, dtype=float), 1e-8))
    ang = u[..., None] * freqs
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=-1)


@dataclass(frozen=True)
class MLPSpec:
    """Fully connected architecture: state ++ time embedding -> hidden -> state."""

    dim: int
    hidden: tuple = (256, 256, 256)
    n_freqs: int = 32
    freq_min: float = 0.25
    freq_max: float = 8.0

    @property
    def input_dim(self) -> int:
        return self.dim + 2 * self.n_freqs

    @property
    def layer_dims(self) -> list:
        widths = [self.input_dim, *self.hidden, self.dim]
        return list(zip(widths[:-1], widths[1:]))

    @property
    def param_count(self) -> int:
        return sum(fan_in * fan_out + fan_out for fan_in, fan_out in self.layer_dims)


def _unpack(spec: MLPSpec, params: np.ndarray):
    """Views of (W, b) per layer; W stored as (fan_in, fan_out)."""
    out, pos = [], 0
    for fan_in, fan_out in spec.layer_dims:
        w = params[pos:pos + fan_in * fan_out].reshape(fan_in, fan_out)
        pos += fan_in * fan_out
        b = params[pos:pos + fan_out]
        pos += fan_out
        out.append((w, b))
    return out


def init_params(spec: MLPSpec, rng: np.random.Generator) -> np.ndarray:
    params = np.empty(spec.param_count)
    pos = 0
    for fan_in, fan_out in spec.layer_dims:
        scale = np.sqrt(2.0 / (fan_in + fan_out))
        params[pos:pos + fan_in * fan_out] = scale * rng.standard_normal(fan_in * fan_out)
        pos += fan_in * fan_out
        params[pos:pos + fan_out] = 0.0
        pos += fan_out
    return params


@dataclass(frozen=True)
class VectorFieldModel:
    spec: MLPSpec
    params: np.ndarray
    interp: Interpolant = field(default_factory=linear_interpolant)
    report: dict = field(default_factory=dict, compare=False)

    def velocity(self, x_t, t):
        return velocity(self, x_t, t)


def _assemble_input(spec: MLPSpec, x_t: np.ndarray, t: float) -> np.ndarray:
    emb = time_embedding(float(t), spec.n_freqs, spec.freq_min, spec.freq_max)
    return np.hstack([x_t, np.broadcast_to(emb, (len(x_t), emb.shape[-1]))])


def _forward_acts(spec: MLPSpec, params: np.ndarray, inp: np.ndarray):
    acts = [inp]
    layers = _unpack(spec, params)
    for i, (w, b) in enumerate(layers):
        z = acts[-1] @ w + b
        acts.append(z if i == len(layers) - 1 else np.tanh(z))
    return acts


def velocity(model: VectorFieldModel, x_t, t) -> np.ndarray:
    """Deterministic forward evaluation of the fitted vector field."""
    x_t = np.asarray(x_t, dtype=float)
    single = x_t.ndim == 1
    inp = _assemble_input(model.spec, np.atleast_2d(x_t), t)
    out = _forward_acts(model.spec, model.params, inp)[-1]
    return out[0] if single else out


# ---------------------------------------------------------------------------
# training


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 1000
    batch: int = 1024
    lr: float = 5e-5
    lr_final: Optional[float] = None  # anneal target; None keeps lr constant
    lr_hold: float = 0.5  # fraction of steps at full lr before the anneal starts
    warm_start: bool = True
    loss_weighting: str = "none"  # "none" | "debias"
    hidden: tuple = (256, 256, 256)  # architecture when no warm-start model given
    antithetic_pairs: bool = False  # pair (eps, -eps) per resampled point
    clip_norm: float = 10.0
    eval_every: Optional[int] = None

    def __post_init__(self):
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if self.batch < 2:
            raise ValueError("batch must be >= 2")
        if self.lr <= 0:
            raise ValueError("lr must be > 0")
        if self.loss_weighting not in ("none", "debias"):
            raise ValueError("loss_weighting must be 'none' or 'debias'")


def _loss_and_grad(spec: MLPSpec, params: np.ndarray, inp: np.ndarray,
                   targets: np.ndarray, loss_w=None):
    """Weighted MSE and its gradient w.r.t. the flat parameter vector."""
    acts = _forward_acts(spec, params, inp)
    diff = acts[-1] - targets
    w = 1.0 if loss_w is None else loss_w
    denom = diff.size
    loss = float(np.sum(w * diff * diff) / denom)
    dz = 2.0 * w * diff / denom
    grad = np.empty_like(params)
    layers = _unpack(spec, params)
    offsets = []
    pos = 0
    for fan_in, fan_out in spec.layer_dims:
        offsets.append(pos)
        pos += fan_in * fan_out + fan_out
    for i in range(len(layers) - 1, -1, -1):
        w_i, _ = layers[i]
        a_prev = acts[i]
        o = offsets[i]
        grad[o:o + w_i.size] = (a_prev.T @ dz).ravel()
        grad[o + w_i.size:o + w_i.size + w_i.shape[1]] = dz.sum(axis=0)
        if i > 0:
            dz = (dz @ w_i.T) * (1.0 - a_prev * a_prev)  # tanh'
    return loss, grad


class _Adam:
    def __init__(self, n: int, lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.lr, self.betas, self.eps = lr, betas, eps
        self.m = np.zeros(n)
        self.v = np.zeros(n)
        self.step = 0

    def update(self, params: np.ndarray, grad: np.ndarray,
               lr: Optional[float] = None) -> np.ndarray:
        b1, b2 = self.betas
        self.step += 1
        self.m = b1 * self.m + (1 - b1) * grad
        self.v = b2 * self.v + (1 - b2) * grad * grad
        mhat = self.m / (1 - b1**self.step)
        vhat = self.v / (1 - b2**self.step)
        return params - (self.lr if lr is None else lr) * mhat / (np.sqrt(vhat) + self.eps)


def _training_batch(pool: FitnessPool, idx, t: float, interp: Interpolant,
                    eps: np.ndarray, use_debias: bool):
    x = pool.points[idx]
    a, s = interp.alpha(t), interp.sigma(t)
    da, ds = interp.dalpha(t), interp.dsigma(t)
    x_t = a * x + s * eps
    target = da * x + ds * eps
    lw = None
    if use_debias and pool.loss_weights is not None:
        lw = pool.loss_weights[idx]
    return x_t, target, lw


def train_flow_matching(pool: FitnessPool, t_fixed: float, config: TrainConfig,
                        rng: np.random.Generator,
                        init: Optional[VectorFieldModel] = None) -> VectorFieldModel:
    """Fit the vector field at fixed t on fitness-resampled batches.

    A 10% held-out split (fixed resample + fixed noise) tracks evaluation
    loss; the returned parameters are the best ones seen, so the final
    held-out loss never exceeds the initial one.
    """
    if not 0.0 < t_fixed <= 1.0:
        raise ValueError("t_fixed must lie in (0, 1]")
    dim = pool.points.shape[1]
    if init is not None:
        spec, params, interp = init.spec, init.params.copy(), init.interp
    else:
        spec = MLPSpec(dim=dim, hidden=tuple(config.hidden))
        params = init_params(spec, rng)
        interp = linear_interpolant()
    use_debias = config.loss_weighting == "debias"

    n_eval = int(min(4096, max(2, round(0.1 * len(pool.points)))))
    eval_idx = resample_indices(pool.probs, n_eval, rng)
    eval_eps = rng.standard_normal((n_eval, dim))
    ex_t, etgt, elw = _training_batch(pool, eval_idx, t_fixed, interp, eval_eps, use_debias)
    einp = _assemble_input(spec, ex_t, t_fixed)

    def eval_loss(p):
        return _loss_and_grad(spec, p, einp, etgt, elw)[0]

    initial = eval_loss(params)
    best_loss, best_params = initial, params.copy()
    history = [(0, initial)]
    every = config.eval_every or max(1, config.steps // 20)
    adam = _Adam(spec.param_count, config.lr)
    final_eval = initial
    for step in range(1, config.steps + 1):
        if config.antithetic_pairs:
            # pairing cancels the eps-odd part of the gradient noise, which
            # dominates at small t where the regression target is noise-heavy
            half = resample_indices(pool.probs, config.batch // 2, rng)
            idx = np.repeat(half, 2)
            eps = np.empty((2 * (config.batch // 2), dim))
            eps[0::2] = rng.standard_normal((config.batch // 2, dim))
            eps[1::2] = -eps[0::2]
        else:
            idx = resample_indices(pool.probs, config.batch, rng)
            eps = rng.standard_normal((config.batch, dim))
        x_t, tgt, lw = _training_batch(pool, idx, t_fixed, interp, eps, use_debias)
        inp = _assemble_input(spec, x_t, t_fixed)
        loss, grad = _loss_and_grad(spec, params, inp, tgt, lw)
        if not np.isfinite(loss):
            raise TrainingDivergedError(
                f"non-finite training loss {loss} at step {step} (t={t_fixed})")
        gnorm = float(np.linalg.norm(grad))
        if gnorm > config.clip_norm:
            grad = grad * (config.clip_norm / gnorm)
        lr = config.lr
        if config.lr_final is not None:
            # hold at full lr to let the solution travel, then anneal
            # geometrically so the last iterates settle at lr_final
            hold = int(config.lr_hold * config.steps)
            if step > hold:
                frac = (step - hold) / max(1, config.steps - hold)
                lr = config.lr * (config.lr_final / config.lr) ** frac
        params = adam.update(params, grad, lr)
        if step % every == 0 or step == config.steps:
            el = eval_loss(params)
            history.append((step, el))
            final_eval = el
            if el < best_loss:
                best_loss, best_params = el, params.copy()
    # keep the last iterate unless it regressed past the starting loss
    # (held-out eval is noisy; argmin-selection would pick arbitrary iterates)
    if config.steps > 0 and final_eval > initial:
        chosen, chosen_loss = best_params, best_loss
    else:
        chosen, chosen_loss = params, final_eval
    report = {"initial_loss": initial, "final_loss": chosen_loss,
              "eval_history": history, "steps": config.steps, "t": t_fixed}
    return VectorFieldModel(spec=spec, params=chosen, interp=interp, report=report)


# ---------------------------------------------------------------------------
# score algebra


def _coeffs(t, interp: Optional[Interpolant]):
    interp = interp or linear_interpolant()
    a, s = interp.alpha(t), interp.sigma(t)
    da, ds = interp.dalpha(t), interp.dsigma(t)
    return a, s, da, ds, da * s - a * ds


def score_from_velocity(v, x_t, t, interp: Optional[Interpolant] = None):
    """score = (alpha v - dalpha x_t) / (sigma (dalpha sigma - alpha dsigma))."""
    a, s, da, ds, denom = _coeffs(t, interp)
    if s <= 0 or denom == 0:
        raise DegenerateKernelError(f"score undefined at t={t}")
    return (a * np.asarray(v) - da * np.asarray(x_t)) / (s * denom)


def score_from_posterior_mean(m, x_t, t, interp: Optional[Interpolant] = None):
    """score = (alpha/sigma^2)(m - x_t/alpha) = (alpha m - x_t)/sigma^2."""
    a, s, _, _, _ = _coeffs(t, interp)
    if a <= 0:
        raise DegenerateKernelError(
            f"alpha={a} at t={t}: posterior-mean form undefined, use score_from_velocity")
    if s <= 0:
        raise DegenerateKernelError(f"sigma={s} at t={t}: score undefined")
    return (a * np.asarray(m) - np.asarray(x_t)) / (s * s)


def posterior_mean(v, x_t, t, interp: Optional[Interpolant] = None):
    """E[x | x_t] = (sigma v - dsigma x_t)/(dalpha sigma - alpha dsigma); linear: x_t - t v."""
    _, s, _, ds, denom = _coeffs(t, interp)
    if denom == 0:
        raise DegenerateKernelError(f"degenerate interpolant at t={t}")
    return (s * np.asarray(v) - ds * np.asarray(x_t)) / denom


def sigma_score(v, x_t, t, interp: Optional[Interpolant] = None):
    """sigma_t * score, division-free form (alpha v - dalpha x_t)/(dalpha sigma - alpha dsigma).

    Well-defined at every t in [0, 1] for the linear schedule (denominator -1),
    which is what makes the rescaled gradient usable near both endpoints.
    """
    a, _, da, _, denom = _coeffs(t, interp)
    if denom == 0:
        raise DegenerateKernelError(f"degenerate interpolant at t={t}")
    return (a * np.asarray(v) - da * np.asarray(x_t)) / denom


# ---------------------------------------------------------------------------
# analytic oracle


@dataclass(frozen=True)
class GaussianMixtureOracle:
    """Closed-form score/velocity references for mixture data distributions."""

    means: np.ndarray  # (K, n)
    variances: np.ndarray  # (K,) isotropic per component
    weights: np.ndarray  # (K,)
    interp: Interpolant = field(default_factory=linear_interpolant)

    def __post_init__(self):
        object.__setattr__(self, "means", np.atleast_2d(np.asarray(self.means, dtype=float)))
        object.__setattr__(self, "variances", np.asarray(self.variances, dtype=float))
        object.__setattr__(self, "weights", np.asarray(self.weights, dtype=float))
        if np.any(self.weights <= 0) or abs(self.weights.sum() - 1.0) > 1e-9:
            raise ValueError("mixture weights must be positive and sum to 1")
        if np.any(self.variances <= 0):
            raise ValueError("component variances must be positive")

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    def _parts(self, x_t, t):
        x2 = np.atleast_2d(np.asarray(x_t, dtype=float))
        a, s = self.interp.alpha(t), self.interp.sigma(t)
        var = a * a * self.variances + s * s  # (K,) diffused component variances
        dev = x2[:, None, :] - a * self.means[None, :, :]  # (B, K, n)
        sq = np.sum(dev * dev, axis=-1)  # (B, K)
        loglik = (np.log(self.weights) - 0.5 * self.dim * np.log(2 * np.pi * var)
                  - 0.5 * sq / var)
        return x2, a, s, var, dev, loglik

    def logpdf(self, x_t, t):
        """log p(x_t) = logsumexp_i [log w_i + log N(x_t; alpha mu_i, var_i I)]."""
        x2, _, _, _, _, loglik = self._parts(x_t, t)
        mx = loglik.max(axis=1, keepdims=True)
        out = mx[:, 0] + np.log(np.sum(np.exp(loglik - mx), axis=1))
        return out if np.asarray(x_t).ndim > 1 else out[0]

    def _responsibilities(self, loglik):
        mx = loglik.max(axis=1, keepdims=True)
        e = np.exp(loglik - mx)
        return e / e.sum(axis=1, keepdims=True)

    def score(self, x_t, t):
        x2, _, _, var, dev, loglik = self._parts(x_t, t)
        resp = self._responsibilities(loglik)
        out = np.sum(resp[:, :, None] * (-dev / var[None, :, None]), axis=1)
        return out if np.asarray(x_t).ndim > 1 else out[0]

    def posterior_mean(self, x_t, t):
        """E[x | x_t]: responsibility-weighted per-component Gaussian posteriors."""
        x2, a, s, var, _, loglik = self._parts(x_t, t)
        resp = self._responsibilities(loglik)
        m_i = (a * self.variances[None, :, None] * x2[:, None, :]
               + s * s * self.means[None, :, :]) / var[None, :, None]
        out = np.sum(resp[:, :, None] * m_i, axis=1)
        return out if np.asarray(x_t).ndim > 1 else out[0]

    def velocity(self, x_t, t):
        """Oracle v(x_t, t) recovered from the posterior mean (needs sigma_t > 0)."""
        x2 = np.atleast_2d(np.asarray(x_t, dtype=float))
        a, s = self.interp.alpha(t), self.interp.sigma(t)
        da, ds = self.interp.dalpha(t), self.interp.dsigma(t)
        if s <= 0:
            raise DegenerateKernelError(f"velocity oracle undefined at sigma={s}")
        m = np.atleast_2d(self.posterior_mean(x2, t))
        out = (np.asarray(m) * (da * s - a * ds) + ds * x2) / s
        return out if np.asarray(x_t).ndim > 1 else out[0]

    def sample(self, count: int, rng: np.random.Generator) -> np.ndarray:
        comp = rng.choice(len(self.weights), size=count, p=self.weights)
        eps = rng.standard_normal((count, self.dim))
        return self.means[comp] + np.sqrt(self.variances[comp])[:, None] * eps


def analytic_mixture_score(oracle: GaussianMixtureOracle, x_t, t):
    return oracle.score(x_t, t)


# ---------------------------------------------------------------------------
# reverse-time sampling


def sample_reverse_sde(source, count: int, dim: int,
                       rng: Optional[np.random.Generator] = None,
                       t_start: float = 1.0, n_steps: int = 250,
                       w_schedule=None, t_min: float = 1e-3,
                       x0: Optional[np.ndarray] = None,
                       interp: Optional[Interpolant] = None) -> np.ndarray:
    """Integrate the reverse-time SDE from t_start down to t_min.

    Euler-Maruyama step (t decreasing by delta):
        x <- x - delta*v(x,t) + (w_t delta / 2)*score + sqrt(w_t delta)*xi.
    Default diffusion w_t = sigma_t; w_t == 0 degenerates to the
    deterministic probability-flow update and needs no rng.
    """
    interp = interp or linear_interpolant()
    if w_schedule is None:
        w_schedule = interp.sigma
    if x0 is not None:
        x = np.array(x0, dtype=float)
    else:
        if rng is None:
            raise ValueError("rng required when x0 is not given")
        x = rng.standard_normal((count, dim))
    delta = (t_start - t_min) / n_steps
    for k in range(n_steps):
        t = t_start - k * delta
        v = source.velocity(x, t)
        s = score_from_velocity(v, x, t, interp)
        w = float(w_schedule(t))
        x = x - delta * v + 0.5 * w * delta * s
        if w > 0:
            if rng is None:
                raise ValueError("rng required for nonzero diffusion")
            x = x + np.sqrt(w * delta) * rng.standard_normal(x.shape)
        if not np.all(np.isfinite(x)):
            raise RuntimeError(f"reverse SDE diverged at step {k} (t={t:.4f})")
    return x


# ---------------------------------------------------------------------------
# gradient verification and serialization


def parameter_gradient_check(model: VectorFieldModel, x_t: np.ndarray, t: float,
                             targets: np.ndarray, loss_w=None,
                             rng: Optional[np.random.Generator] = None,
                             n_checks: int = 200, h: float = 1e-4) -> float:
    """Max relative error between analytic and central-difference loss gradients."""
    rng = rng or np.random.default_rng(0)
    spec = model.spec
    inp = _assemble_input(spec, np.atleast_2d(x_t), t)
    tgt = np.atleast_2d(targets)
    _, grad = _loss_and_grad(spec, model.params, inp, tgt, loss_w)
    idx = rng.choice(spec.param_count, size=min(n_checks, spec.param_count),
                     replace=False)
    worst = 0.0
    p = model.params.copy()
    for i in idx:
        orig = p[i]
        p[i] = orig + h
        up = _loss_and_grad(spec, p, inp, tgt, loss_w)[0]
        p[i] = orig - h
        dn = _loss_and_grad(spec, p, inp, tgt, loss_w)[0]
        p[i] = orig
        fd = (up - dn) / (2 * h)
        err = abs(fd - grad[i]) / max(abs(fd), abs(grad[i]), 1e-8)
        worst = max(worst, err)
    return worst


def save_model(model: VectorFieldModel, path) -> None:
    """Versioned checkpoint: magic, JSON header, little-endian float64 params."""
    header = {
        "format": "vector-field", "version": 1,
        "dim": model.spec.dim, "hidden": list(model.spec.hidden),
        "n_freqs": model.spec.n_freqs,
        "freq_min": model.spec.freq_min, "freq_max": model.spec.freq_max,
        "interpolant": model.interp.name,
        "param_count": model.spec.param_count,
    }
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        fh.write(np.ascontiguousarray(model.params, dtype="<f8").tobytes())


def load_model(path) -> VectorFieldModel:
    with open(path, "rb") as fh:
        magic = fh.read(len(_MAGIC))
        if magic != _MAGIC:
            raise ValueError(f"not a model checkpoint: bad magic {magic!r}")
        header = json.loads(fh.readline().decode())
        if header.get("version") != 1 or header.get("format") != "vector-field":
            raise ValueError(f"unsupported checkpoint header: {header}")
        if header["interpolant"] != "linear":
            raise ValueError(f"unknown interpolant {header['interpolant']!r}")
        raw = fh.read()
    spec = MLPSpec(dim=header["dim"], hidden=tuple(header["hidden"]),
                   n_freqs=header["n_freqs"], freq_min=header["freq_min"],
                   freq_max=header["freq_max"])
    params = np.frombuffer(raw, dtype="<f8").astype(float)
    if params.size != header["param_count"] or params.size != spec.param_count:
        raise ValueError("parameter count mismatch in checkpoint")
    return VectorFieldModel(spec=spec, params=params, interp=linear_interpolant())
