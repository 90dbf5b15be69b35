"""DDPM core: linear noise schedule, epsilon-prediction training, ancestral
sampling, and partial-noising motion correction with an n-sweep."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from . import metrics
from .neural import Adam, UNet
from .numerics import Rng, gaussian

DEFAULT_T = 500
DEFAULT_N = 150
DEFAULT_BETA_START = 1e-4
DEFAULT_BETA_END = 0.02
DDPM_LR = 5e-5
BATCH_SIZE = 6


@dataclass(frozen=True)
class NoiseSchedule:
    """Tables indexed by timestep; index 0 of ``alpha_bar`` is 1.

    ``beta``, ``alpha`` and ``sigma`` are stored with a dummy entry at index 0
    so that ``beta[t]`` is the step-``t`` value for ``t`` in 1..T.
    """

    T: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    sigma: np.ndarray

    @classmethod
    def from_betas(cls, betas) -> "NoiseSchedule":
        b = np.asarray(betas, dtype=np.float64)
        if b.ndim != 1 or b.size < 1:
            raise ValueError("need at least one beta")
        if not np.all((b > 0) & (b < 1)):
            raise ValueError("betas must lie strictly inside (0, 1)")
        T = b.size
        beta = np.concatenate([[0.0], b])
        alpha = 1.0 - beta
        alpha_bar = np.cumprod(alpha)  # alpha[0] == 1 so alpha_bar[0] == 1
        sigma = np.sqrt(beta)
        for arr in (beta, alpha, alpha_bar, sigma):
            arr.flags.writeable = False
        return cls(T, beta, alpha, alpha_bar, sigma)


def build_schedule(
    T: int = DEFAULT_T, beta_start: float = DEFAULT_BETA_START, beta_end: float = DEFAULT_BETA_END
) -> NoiseSchedule:
    """Linear beta schedule from ``beta_start`` to ``beta_end`` over T steps."""
    if T < 1:
        raise ValueError("T must be >= 1")
    if not 0 < beta_start <= beta_end < 1:
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    if T == 1:
        return NoiseSchedule.from_betas([beta_start])
    return NoiseSchedule.from_betas(np.linspace(beta_start, beta_end, T))


def q_sample(x0, t, z, sched: NoiseSchedule) -> np.ndarray:
    """Closed-form forward noising ``sqrt(ab_t) x0 + sqrt(1 - ab_t) z``.

    ``t`` may be a scalar or one timestep per leading batch entry.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    t_arr = np.asarray(t)
    if np.any(t_arr < 0) or np.any(t_arr > sched.T):
        raise ValueError(f"t must be in [0, {sched.T}]")
    if t_arr.ndim == 0:
        if int(t_arr) == 0:
            return x0.copy()
        ab = sched.alpha_bar[int(t_arr)]
        return math.sqrt(ab) * x0 + math.sqrt(1.0 - ab) * z
    ab = sched.alpha_bar[t_arr].reshape((-1,) + (1,) * (x0.ndim - 1))
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * z


def _as_batch(x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        x = x[None, None]
    elif x.ndim == 3:
        x = x[:, None]
    return x


def diffusion_loss(model: UNet, x0, t, z, sched: NoiseSchedule, with_grad=True):
    """Mean squared epsilon error and its parameter gradient."""
    x0 = _as_batch(x0)
    z = np.asarray(z).reshape(x0.shape)
    xt = q_sample(x0, np.asarray(t), z, sched)
    pred, cache = model.forward(xt, np.asarray(t), keep_cache=True)
    diff = pred - z
    loss = float(np.mean(diff * diff))
    if not with_grad:
        return loss, None
    grad = model.backward_from_cache(cache, 2.0 * diff / diff.size)
    return loss, grad


def per_image_loss(model: UNet, x0, t, z, sched: NoiseSchedule) -> np.ndarray:
    x0 = _as_batch(x0)
    z = np.asarray(z).reshape(x0.shape)
    pred = model.forward(q_sample(x0, np.asarray(t), z, sched), np.asarray(t))
    return np.mean((pred - z) ** 2, axis=(1, 2, 3))


def sample_t_z(rng: Rng, batch_shape, sched: NoiseSchedule):
    t = rng.integers(1, sched.T + 1, size=batch_shape[0])
    z = gaussian(rng, batch_shape)
    return t, z


def train_step(model: UNet, x0, sched: NoiseSchedule, rng: Rng, optimizer: Adam, t=None, z=None) -> float:
    """One optimizer step on the simple DDPM objective; returns the loss
    before the update. ``t`` and ``z`` are drawn from ``rng`` unless given."""
    x0 = _as_batch(x0)
    if x0.shape[0] == 0:
        raise ValueError("empty batch")
    if t is None or z is None:
        t_new, z_new = sample_t_z(rng, x0.shape, sched)
        t = t_new if t is None else t
        z = z_new if z is None else z
    loss, grad = diffusion_loss(model, x0, t, z, sched)
    optimizer.step(model.params, grad)
    return loss


def validation_loss(model: UNet, images, sched: NoiseSchedule, seed: int = 0, repeats: int = 4) -> float:
    """Epsilon MSE on fixed (t, z) draws so rounds are comparable."""
    x0 = _as_batch(images)
    rng = np.random.default_rng(seed)
    total = 0.0
    for _ in range(repeats):
        t, z = sample_t_z(rng, x0.shape, sched)
        total += float(np.mean(per_image_loss(model, x0, t, z, sched)))
    return total / repeats


@dataclass
class TrainHistory:
    losses: list
    val_rounds: list  # (step, val_loss)
    best_step: int
    stopped_early: bool


def train_ddpm(
    model: UNet,
    train_images,
    sched: NoiseSchedule,
    steps: int,
    rng: Rng,
    lr: float = DDPM_LR,
    batch_size: int = BATCH_SIZE,
    val_images=None,
    val_every: int = 200,
    patience: int = 10,
    augment: bool = True,
    callback=None,
):
    """Train on clean images only; early stopping on validation epsilon loss.

    Returns the history; ``model.params`` ends at the best validation round
    when validation images are given. ``callback(step, loss)`` runs after
    every step; a true return value ends training early.
    """
    from .neural import EarlyStopping

    data = _as_batch(train_images)
    if data.shape[0] == 0:
        raise ValueError("empty training set")
    opt = Adam(model.n_params, lr=lr)
    stopper = EarlyStopping(patience=patience)
    losses, rounds = [], []
    stopped = False
    for step in range(steps):
        idx = rng.integers(0, data.shape[0], size=batch_size)
        batch = data[idx]
        if augment:
            flips = rng.integers(0, 2, size=batch_size).astype(bool)
            batch = batch.copy()
            batch[flips] = batch[flips][..., ::-1]
        loss = train_step(model, batch, sched, rng, opt)
        losses.append(loss)
        if callback is not None and callback(step, loss):
            break
        if val_images is not None and ((step + 1) % val_every == 0 or step + 1 == steps):
            vl = validation_loss(model, val_images, sched)
            rounds.append((step + 1, vl))
            if stopper.update(vl, model.params):
                stopped = True
                break
    best_step = len(losses)
    if val_images is not None and stopper.best_params is not None:
        stopper.restore(model.params)
        best_step = rounds[stopper.best_round][0]
    return TrainHistory(losses, rounds, best_step, stopped)


# ---------------------------------------------------------------- sampling


def reverse_step(x_t, t: int, eps, sched: NoiseSchedule, z) -> np.ndarray:
    """``x_{t-1} = (x_t - (1-a_t)/sqrt(1-ab_t) eps) / sqrt(a_t) + sigma_t z``."""
    a = sched.alpha[t]
    coef = (1.0 - a) / math.sqrt(1.0 - sched.alpha_bar[t])
    out = (x_t - coef * eps) / math.sqrt(a)
    if z is not None:
        out = out + sched.sigma[t] * z
    return out


def _reverse_loop(model, x, start: int, sched: NoiseSchedule, rng: Rng, eps_fn=None, sigma_scale=1.0):
    eps_fn = eps_fn or (lambda xt, t: model.forward(xt, np.full(xt.shape[0], t)))
    for t in range(start, 0, -1):
        eps = eps_fn(x, t)
        z = gaussian(rng, x.shape) if t > 1 else None
        if z is not None and sigma_scale != 1.0:
            z = z * sigma_scale
        x = reverse_step(x, t, eps, sched, z)
    return x


def ancestral_sample(model: UNet, sched: NoiseSchedule, shape, rng: Rng, eps_fn=None, sigma_scale=1.0):
    """Generate from pure noise: ``x_T ~ N(0, I)`` then T reverse steps.

    ``shape`` is ``[B, C, H, W]``. ``eps_fn(x, t)`` and ``sigma_scale``
    override the network and noise level (used to check the algebra).
    """
    shape = tuple(shape)
    x = gaussian(rng, shape)
    return _reverse_loop(model, x, sched.T, sched, rng, eps_fn, sigma_scale)


def correct(
    Y,
    n: int,
    model: UNet,
    sched: NoiseSchedule,
    rng: Rng,
    paper_literal_noising: bool = False,
    eps_fn=None,
    sigma_scale: float = 1.0,
):
    """Partial-noising correction of motion-corrupted image(s) ``Y``.

    ``Y`` is noised to step ``n`` with ``sqrt(ab_n) Y + sqrt(1 - ab_n) z`` and
    then denoised for ``n`` reverse steps (no noise on the last one).
    ``paper_literal_noising`` uses ``(1 - ab_n) z`` for the initial noise
    instead. ``n = 0`` returns ``Y`` unchanged.

    Accepts ``[H, W]``, ``[B, H, W]`` or ``[B, C, H, W]`` and returns the
    same shape.
    """
    if not 0 <= n < sched.T:
        raise ValueError(f"n must satisfy 0 <= n < T={sched.T}, got {n}")
    Y = np.asarray(Y, dtype=np.float64)
    if n == 0:
        return Y.copy()
    x = _as_batch(Y)
    ab = sched.alpha_bar[n]
    z = gaussian(rng, x.shape)
    noise_coef = (1.0 - ab) if paper_literal_noising else math.sqrt(1.0 - ab)
    x = math.sqrt(ab) * x + noise_coef * z
    x = _reverse_loop(model, x, n, sched, rng, eps_fn, sigma_scale)
    return x.reshape(Y.shape)


def correct_batched(Y, n, model, sched, seed: int, chunk: int = 25, **kw):
    """Correct a stack of images in chunks; chunk ``i`` draws from its own
    generator seeded by ``(seed, i)`` so results do not depend on how many
    chunks run before it."""
    Y = _as_batch(Y)
    out = np.empty_like(Y)
    for i, s in enumerate(range(0, Y.shape[0], chunk)):
        rng = np.random.default_rng([seed, i])
        out[s : s + chunk] = correct(Y[s : s + chunk], n, model, sched, rng, **kw)
    return out


SWEEP_FIELDS = ("n", "ssim_mean", "ssim_std", "nmse_mean", "nmse_std", "psnr_mean", "psnr_std")


def sweep_n(
    Y_set,
    clean_set,
    n_list,
    model: UNet,
    sched: NoiseSchedule,
    seed: int = 0,
    chunk: int = 25,
    keep_images=False,
    clip=True,
):
    """Correct every image at each ``n`` and summarize the metrics.

    Outputs are clipped to [0, 1] before scoring when ``clip`` is set, the
    same treatment the evaluation pipeline applies. Returns a list of dict rows with the ``SWEEP_FIELDS`` keys; when
    ``keep_images`` is set, also a dict ``n -> corrected stack``.
    """
    Y = _as_batch(Y_set)
    X = _as_batch(clean_set)
    if Y.shape[0] != X.shape[0]:
        raise ValueError(f"mismatched set lengths: {Y.shape[0]} corrupted vs {X.shape[0]} clean")
    rows, images = [], {}
    for n in n_list:
        out = correct_batched(Y, int(n), model, sched, seed=seed, chunk=chunk)
        if clip:
            out = np.clip(out, 0.0, 1.0)
        recs = [metrics.evaluate_pair(out[i, 0], X[i, 0]) for i in range(X.shape[0])]
        row = {"n": int(n)}
        for name in ("ssim", "nmse", "psnr"):
            row[f"{name}_mean"], row[f"{name}_std"] = metrics.mean_std([getattr(r, name) for r in recs])
        rows.append(row)
        if keep_images:
            images[int(n)] = out
    if keep_images:
        return rows, images
    return rows


def write_sweep_csv(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SWEEP_FIELDS)
        for r in rows:
            w.writerow([r["n"]] + [repr(float(r[k])) for k in SWEEP_FIELDS[1:]])


def read_sweep_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return [
            {k: (int(v) if k == "n" else float(v)) for k, v in row.items()}
            for row in csv.DictReader(fh)
        ]
