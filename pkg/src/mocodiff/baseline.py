"""Supervised U-Net corrector trained on (corrupted, clean) pairs."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .neural import Adam, EarlyStopping, UNet

UNET_LR = 1e-3
BATCH_SIZE = 6


@dataclass
class PairedItem:
    corrupted: np.ndarray
    clean: np.ndarray
    patient: str = ""
    plane: str = ""
    slice: int = 0

    def __post_init__(self):
        if np.shape(self.corrupted) != np.shape(self.clean):
            raise ValueError(
                f"pair shape mismatch: {np.shape(self.corrupted)} vs {np.shape(self.clean)}"
            )


@dataclass
class PairedDataset:
    items: list = field(default_factory=list)

    def __len__(self):
        return len(self.items)

    def arrays(self) -> tuple[np.ndarray, np.ndarray]:
        if not self.items:
            raise ValueError("empty dataset")
        shapes = {np.shape(it.clean) for it in self.items}
        if len(shapes) != 1:
            raise ValueError(f"inconsistent image shapes in dataset: {sorted(shapes)}")
        Y = np.stack([np.asarray(it.corrupted, dtype=np.float64) for it in self.items])
        X = np.stack([np.asarray(it.clean, dtype=np.float64) for it in self.items])
        if Y.ndim == 3:
            Y, X = Y[:, None], X[:, None]
        return Y, X

    def patients(self) -> set:
        return {it.patient for it in self.items}


def predict(model: UNet, Y, chunk: int = 25) -> np.ndarray:
    """Raw network output with the time input held at 0."""
    Y = np.asarray(Y, dtype=np.float64)
    single = Y.ndim == 2
    x = Y[None, None] if single else (Y[:, None] if Y.ndim == 3 else Y)
    out = np.empty_like(x)
    for s in range(0, x.shape[0], chunk):
        out[s : s + chunk] = model.forward(x[s : s + chunk], 0)
    return out.reshape(Y.shape)


def correct_supervised(model: UNet, Y) -> np.ndarray:
    """Single forward pass, clipped to [0, 1]."""
    return np.clip(predict(model, Y), 0.0, 1.0)


def supervised_loss(model: UNet, Y, X, with_grad=True):
    pred, cache = model.forward(Y, 0, keep_cache=True)
    diff = pred - X
    loss = float(np.mean(diff * diff))
    if not with_grad:
        return loss, None
    return loss, model.backward_from_cache(cache, 2.0 * diff / diff.size)


@dataclass
class SupervisedHistory:
    losses: list
    val_rounds: list  # (step, val_mse)
    best_step: int
    stopped_early: bool


def train_supervised(
    model: UNet,
    dataset: PairedDataset,
    val_dataset: PairedDataset,
    lr: float = UNET_LR,
    batch_size: int = BATCH_SIZE,
    steps: int = 2000,
    rng=None,
    val_every: int = 100,
    patience: int = 10,
    callback=None,
) -> SupervisedHistory:
    """Minimize MSE(model(corrupted), clean) with Adam and early stopping.

    The model is left holding the parameters of the best validation round.
    ``callback(step, loss)`` runs after every step; a true return value ends
    training early.
    """
    if len(dataset) == 0 or len(val_dataset) == 0:
        raise ValueError("train and validation sets must be nonempty")
    Y, X = dataset.arrays()
    Yv, Xv = val_dataset.arrays()
    if Y.shape[1:] != Yv.shape[1:]:
        raise ValueError(f"train/val image shapes differ: {Y.shape[1:]} vs {Yv.shape[1:]}")
    model.check_input(Y[:1])
    rng = rng if rng is not None else np.random.default_rng(0)
    opt = Adam(model.n_params, lr=lr)
    stopper = EarlyStopping(patience=patience)
    losses, rounds = [], []
    stopped = False

    def val_mse():
        total = 0.0
        for s in range(0, Yv.shape[0], 25):
            total += float(np.sum((model.forward(Yv[s : s + 25], 0) - Xv[s : s + 25]) ** 2))
        return total / Xv.size

    for step in range(steps):
        idx = rng.integers(0, Y.shape[0], size=min(batch_size, Y.shape[0]))
        loss, grad = supervised_loss(model, Y[idx], X[idx])
        opt.step(model.params, grad)
        losses.append(loss)
        if callback is not None and callback(step, loss):
            break
        if (step + 1) % val_every == 0 or step + 1 == steps:
            vl = val_mse()
            rounds.append((step + 1, vl))
            if stopper.update(vl, model.params):
                stopped = True
                break
    stopper.restore(model.params)
    best_step = rounds[stopper.best_round][0] if rounds else len(losses)
    return SupervisedHistory(losses, rounds, best_step, stopped)
