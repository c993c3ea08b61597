"""Control-only training loop with early stopping and checkpointing.

``fit`` refuses any lesion-labeled sample in the training data (the
whole point is to learn the control distribution), validates each epoch
on tuning-split controls with epsilon fixed to 0, and returns the
parameters of the best-validation epoch. Everything is deterministic
for a fixed seed.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .datasets import ViewTriplet
from .preprocess import SliceSample
from .tensor import AdamState, adam_step, backward
from .volume import VIEWS


@dataclass
class TrainConfig:
    max_epochs: int = 250
    patience: int = 30
    lr: float = 1e-4
    batch_size: int = 32
    seed: int = 0

    def __post_init__(self):
        if self.patience >= self.max_epochs:
            raise ValueError("patience must be < max_epochs")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


@dataclass
class TrainHistory:
    train_losses: list[float] = field(default_factory=list)
    val_losses: list[float] = field(default_factory=list)

    @property
    def stopped_epoch(self) -> int:
        return len(self.val_losses)

    @property
    def best_epoch(self) -> int:
        """1-based epoch of the minimum validation loss (ties -> earliest)."""
        return int(np.argmin(self.val_losses)) + 1

    def save_csv(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["epoch", "train_loss", "val_loss"])
            for i, (tr, va) in enumerate(zip(self.train_losses, self.val_losses), start=1):
                writer.writerow([i, f"{tr:.8f}", f"{va:.8f}"])


class EarlyStopper:
    """Stop after ``patience`` consecutive epochs without strict improvement."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = np.inf
        self.stale = 0

    def update(self, val_loss: float) -> str:
        if val_loss < self.best:
            self.best = val_loss
            self.stale = 0
            return "continue"
        self.stale += 1
        return "stop" if self.stale >= self.patience else "continue"


def _to_batch_arrays(samples) -> dict[str, np.ndarray]:
    """Stack SliceSamples or ViewTriplets into model input arrays."""
    if not samples:
        raise ValueError("empty sample list")
    if isinstance(samples[0], ViewTriplet):
        return {
            view: np.stack([getattr(t, view).image for t in samples])[:, None].astype(np.float32)
            for view in VIEWS
        }
    return {"axial": np.stack([s.image for s in samples])[:, None].astype(np.float32)}


def _labels_of(samples) -> np.ndarray:
    return np.array([s.label for s in samples], dtype=np.int64)


def fit(model, train_samples, val_samples, config: TrainConfig):
    """Train ``model`` on control samples; returns (best params dict, history).

    ``model`` needs ``params``, ``batch_loss(batch, epsilon)`` and
    ``epsilon_shape(n)``. Samples may be SliceSamples (single-view) or
    ViewTriplets (multi-view); any label-1 sample raises before epoch 1.
    """
    bad = [s for s in train_samples if s.label != 0]
    if bad:
        raise ValueError(
            f"fit: train split contains {len(bad)} lesion-labeled samples "
            f"(first: patient {bad[0].patient_id}); training uses controls only"
        )
    if not val_samples:
        raise ValueError("fit: validation (tuning controls) set is empty")

    train = _to_batch_arrays(train_samples)
    val = _to_batch_arrays([s for s in val_samples if s.label == 0])
    n = len(train_samples)

    rng = np.random.default_rng(config.seed)
    state = AdamState(lr=config.lr).init(model.params)
    stopper = EarlyStopper(config.patience)
    history = TrainHistory()
    best_params = model.params.copy_values()

    for _ in range(config.max_epochs):
        order = rng.permutation(n)
        epoch_loss = 0.0
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            batch = {k: v[idx] for k, v in train.items()}
            eps = rng.standard_normal(model.epsilon_shape(len(idx))).astype(np.float32)
            model.params.zero_grad()
            loss = model.batch_loss(batch, eps)
            backward(loss)
            adam_step(model.params, state)
            epoch_loss += loss.item() * len(idx)
        history.train_losses.append(epoch_loss / n)

        val_loss = evaluate_loss(model, val, batch_size=config.batch_size)
        history.val_losses.append(val_loss)
        if val_loss < stopper.best:
            best_params = model.params.copy_values()
        if stopper.update(val_loss) == "stop":
            break

    model.params.load_values(best_params)
    return best_params, history


def evaluate_loss(model, arrays: dict[str, np.ndarray], batch_size: int = 32) -> float:
    """Deterministic (epsilon=0) mean loss over stacked input arrays."""
    n = arrays["axial"].shape[0]
    total = 0.0
    for start in range(0, n, batch_size):
        batch = {k: v[start : start + batch_size] for k, v in arrays.items()}
        m = batch["axial"].shape[0]
        total += model.batch_loss(batch, 0.0).item() * m
    return total / n
