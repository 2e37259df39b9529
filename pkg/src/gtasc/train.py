"""Epoch loop with LR-on-plateau halving and early stopping on validation accuracy."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np

from .dsp import apply_normalization
from .nn import Adam, ASCNet, ModelSpec, focal_loss, loss_and_grads

log = logging.getLogger(__name__)

IMPROVE_EPS = 1e-9
HISTORY_FIELDS = ("epoch", "lr", "train_loss", "train_acc", "val_acc")


@dataclass(frozen=True)
class TrainConfig:
    initial_lr: float = 1e-3
    plateau_factor: float = 0.5
    plateau_patience: int = 20
    early_stop_patience: int = 50
    max_epochs: int = 500
    batch_size: int = 32
    seed: int = 0
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0
    dtype: str = "float32"

    def __post_init__(self):
        if not 0 < self.plateau_factor < 1:
            raise ValueError("plateau_factor must lie in (0, 1)")
        if min(self.plateau_patience, self.early_stop_patience, self.max_epochs, self.batch_size) < 1:
            raise ValueError("patience, max_epochs and batch_size must be positive")
        if self.plateau_patience >= self.early_stop_patience:
            raise ValueError("plateau_patience must be smaller than early_stop_patience")


@dataclass
class TrainState:
    current_lr: float
    epoch: int = 0
    best_val_acc: float = -np.inf
    best_epoch: int = 0
    epochs_since_improvement: int = 0
    plateau_counter: int = 0
    reductions: int = 0
    history: list[dict] = field(default_factory=list)


class PlateauScheduler:
    """Halve the LR after ``plateau_patience`` epochs without improvement; stop after
    ``early_stop_patience`` epochs without improvement or at ``max_epochs``.

    The plateau counter restarts after each reduction; the early-stop counter only
    restarts on an improvement.
    """

    def __init__(self, cfg: TrainConfig):
        self.cfg = cfg
        self.state = TrainState(current_lr=cfg.initial_lr)

    def step(self, val_acc: float) -> tuple[float, bool]:
        st, cfg = self.state, self.cfg
        st.epoch += 1
        if val_acc > st.best_val_acc + IMPROVE_EPS:
            st.best_val_acc = val_acc
            st.best_epoch = st.epoch
            st.epochs_since_improvement = 0
            st.plateau_counter = 0
        else:
            st.epochs_since_improvement += 1
            st.plateau_counter += 1
            if st.plateau_counter >= cfg.plateau_patience:
                st.reductions += 1
                st.current_lr = cfg.initial_lr * cfg.plateau_factor ** st.reductions
                st.plateau_counter = 0
        stop = (st.epochs_since_improvement >= cfg.early_stop_patience
                or st.epoch >= cfg.max_epochs)
        return st.current_lr, stop

    @property
    def improved(self) -> bool:
        return self.state.best_epoch == self.state.epoch


def scheduler_step(scheduler: PlateauScheduler, val_acc: float) -> tuple[float, bool]:
    return scheduler.step(val_acc)


@dataclass
class Split:
    """Normalized features (N, bands, frames), integer labels and device ids."""
    x: np.ndarray
    y: np.ndarray
    devices: list[str] = field(default_factory=list)

    def __post_init__(self):
        if len(self.x) != len(self.y):
            raise ValueError("features and labels differ in length")
        if not self.devices:
            self.devices = ["?"] * len(self.y)

    def __len__(self):
        return len(self.y)


@dataclass
class Metrics:
    accuracy: float
    loss: float
    per_class: dict
    per_device: dict
    predictions: np.ndarray


def evaluate(model: ASCNet, split: Split, classes=None, batch_size=64,
             alpha=0.25, gamma=2.0) -> Metrics:
    """Inference-mode accuracy, mean focal loss and per-class / per-device accuracy."""
    if len(split) == 0:
        raise ValueError("cannot evaluate an empty split")
    probs = model.predict(split.x, batch_size)
    pred = probs.argmax(axis=1)
    correct = pred == split.y
    names = classes or [str(i) for i in range(probs.shape[1])]
    per_class = {names[c]: float(correct[split.y == c].mean())
                 for c in range(probs.shape[1]) if np.any(split.y == c)}
    devs = np.asarray(split.devices)
    per_device = {d: float(correct[devs == d].mean()) for d in sorted(set(split.devices))}
    return Metrics(float(correct.mean()), focal_loss(probs, split.y, alpha, gamma),
                   per_class, per_device, pred)


def train(spec: ModelSpec, train_split: Split, val_split: Split, cfg: TrainConfig = TrainConfig(),
          on_epoch=None):
    """Returns (best model, history). The model holds the weights of the best-val epoch."""
    if len(train_split) == 0 or len(val_split) == 0:
        raise ValueError("train and validation splits must be non-empty")
    rng = np.random.default_rng(cfg.seed)
    model = ASCNet(spec, seed=int(rng.integers(2 ** 31)), dtype=np.dtype(cfg.dtype))
    opt = Adam(model.parameters(), lr=cfg.initial_lr)
    sched = PlateauScheduler(cfg)
    best_state = None
    n = len(train_split)
    while True:
        lr = opt.lr
        order = rng.permutation(n)
        loss_sum, correct = 0.0, 0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            loss, probs = loss_and_grads(model, train_split.x[idx], train_split.y[idx], train=True,
                                         rng=rng, alpha=cfg.focal_alpha, gamma=cfg.focal_gamma)
            opt.step()
            loss_sum += loss * len(idx)
            correct += int((probs.argmax(axis=1) == train_split.y[idx]).sum())
        val_acc = evaluate(model, val_split, alpha=cfg.focal_alpha, gamma=cfg.focal_gamma).accuracy
        new_lr, stop = sched.step(val_acc)
        row = {"epoch": sched.state.epoch, "lr": lr, "train_loss": loss_sum / n,
               "train_acc": correct / n, "val_acc": val_acc}
        sched.state.history.append(row)
        if sched.improved:
            best_state = model.state_dict()
        log.info("epoch %(epoch)d lr %(lr).3g loss %(train_loss).4f train %(train_acc).3f val %(val_acc).3f", row)
        if on_epoch:
            on_epoch(row)
        opt.lr = new_lr
        if stop:
            break
    model.load_state_dict(best_state)
    return model, sched.state.history


def write_history(path, history):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=HISTORY_FIELDS)
        w.writeheader()
        for row in history:
            w.writerow({k: repr(float(row[k])) if k != "epoch" else row[k] for k in HISTORY_FIELDS})


def read_history(path):
    with open(path, newline="") as fh:
        return [{k: (int(v) if k == "epoch" else float(v)) for k, v in row.items()}
                for row in csv.DictReader(fh)]


def stack_features(mats, stats=None) -> np.ndarray:
    """(N, bands, frames) float32 array; clips must share a frame count."""
    if not mats:
        raise ValueError("no feature matrices")
    frames = {m.frames for m in mats}
    if len(frames) != 1:
        raise ValueError(f"clips have differing frame counts {sorted(frames)}; batching needs one length")
    if stats is not None:
        mats = [apply_normalization(m, stats) for m in mats]
    return np.stack([np.asarray(m.values, dtype=np.float32) for m in mats])
