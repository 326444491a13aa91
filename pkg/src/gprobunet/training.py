"""Training loop with early stopping, and prediction-distribution evaluation."""

from __future__ import annotations

import copy
import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .autodiff import Adam, Module, Tensor, no_grad
from .data import AugmentParams, Dataset, NormStats, apply_augmentation, normalize, rater_agreement
from .metrics import GedReport, cross_term, ged, label_diversity
from .model import (
    LossTerms,
    ProbUNet,
    UNetModel,
    elbo_loss,
    mc_dropout_predict,
    predict_samples,
    unet_loss,
    unet_predict,
)

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


def derive_seed(master: int, *keys: int) -> int:
    """Deterministic child seed: first word of ``SeedSequence([master, *keys])``."""
    return int(np.random.SeedSequence([int(master), *map(int, keys)]).generate_state(1)[0])


@dataclass
class Schedule:
    lr: float = 1e-4
    batch_size: int = 8
    patience: int = 20
    max_epochs: int = 100
    seed: int = 0
    augment: bool = False


@dataclass
class TrainResult:
    best_epoch: int
    best_val_loss: float
    epochs_run: int
    log: list[dict] = field(default_factory=list)
    seconds: float = 0.0


class EarlyStopping:
    """Stop once the validation loss has not improved for more than ``patience`` epochs."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = math.inf
        self.best_epoch = 0
        self.epoch = 0

    def update(self, val_loss: float) -> bool:
        """Record an epoch's loss; True when it is a new minimum."""
        self.epoch += 1
        if val_loss < self.best:
            self.best, self.best_epoch = val_loss, self.epoch
            return True
        return False

    @property
    def should_stop(self) -> bool:
        return self.epoch - self.best_epoch > self.patience


def _batch(ds: Dataset, idx: np.ndarray, rater: np.ndarray, stats: NormStats,
           aug_rng: np.random.Generator | None) -> tuple[Tensor, np.ndarray]:
    imgs, ys = [], []
    for i, r in zip(idx, rater):
        img, m = ds.images[i], ds.masks[i, r]
        if aug_rng is not None:
            img, m = apply_augmentation(img, m, AugmentParams.draw(aug_rng))
        imgs.append(normalize(img, stats))
        ys.append(m)
    return Tensor(np.stack(imgs)[:, None]), np.stack(ys).astype(np.float64)


def loss_for(model: Module) -> Callable[[Module, Tensor, np.ndarray, np.random.Generator], LossTerms]:
    if isinstance(model, ProbUNet):
        return lambda m, x, y, rng: elbo_loss(m, x, y, rng)
    if isinstance(model, UNetModel):
        def _unet(m, x, y, rng):
            m.unet.set_dropout_rng(rng)
            return unet_loss(m, x, y)
        return _unet
    raise TypeError(f"no loss for {type(model).__name__}")


def _check_finite(terms: LossTerms, epoch: int, step: int) -> None:
    for name, v in (("ce", terms.ce), ("kl", terms.kl)):
        if not math.isfinite(v):
            raise TrainingError(f"non-finite {name} term at epoch {epoch}, step {step}")


def validation_loss(model: Module, val: Dataset, stats: NormStats, batch_size: int, seed: int) -> float:
    """Mean loss over the validation split with fixed rater choices and noise."""
    rng = np.random.default_rng(seed)
    loss_fn = loss_for(model)
    model.eval()
    total, n = 0.0, 0
    with no_grad():
        for start in range(0, len(val), batch_size):
            idx = np.arange(start, min(start + batch_size, len(val)))
            rater = rng.integers(val.n_raters, size=idx.size)
            x, y = _batch(val, idx, rater, stats, None)
            terms = loss_fn(model, x, y, rng)
            total += float(terms.loss.data) * idx.size
            n += idx.size
    return total / n


def train(model: Module, train_ds: Dataset, val_ds: Dataset, schedule: Schedule, stats: NormStats,
          on_epoch: Callable[[dict], None] | None = None) -> TrainResult:
    """Adam training with one uniformly drawn rater per sample and iteration.

    On return ``model`` holds the parameters from the epoch with minimum
    validation loss.
    """
    rng = np.random.default_rng(derive_seed(schedule.seed, 1))
    aug_rng = np.random.default_rng(derive_seed(schedule.seed, 2)) if schedule.augment else None
    val_seed = derive_seed(schedule.seed, 3)
    loss_fn = loss_for(model)
    opt = Adam(model.parameters(), lr=schedule.lr)
    stopper = EarlyStopping(schedule.patience)
    best_state = copy.deepcopy(model.state_dict())
    rows: list[dict] = []
    t0 = time.time()
    N = len(train_ds)
    for epoch in range(1, schedule.max_epochs + 1):
        model.train()
        perm = rng.permutation(N)
        sums = {"loss": 0.0, "ce": 0.0, "kl": 0.0}
        for step, start in enumerate(range(0, N, schedule.batch_size)):
            idx = perm[start:start + schedule.batch_size]
            rater = rng.integers(train_ds.n_raters, size=idx.size)
            x, y = _batch(train_ds, idx, rater, stats, aug_rng)
            opt.zero_grad()
            terms = loss_fn(model, x, y, rng)
            _check_finite(terms, epoch, step)
            terms.loss.backward()
            opt.step()
            for k, v in (("loss", float(terms.loss.data)), ("ce", terms.ce), ("kl", terms.kl)):
                sums[k] += v * idx.size
        val = validation_loss(model, val_ds, stats, schedule.batch_size, val_seed)
        if not math.isfinite(val):
            raise TrainingError(f"non-finite validation loss at epoch {epoch}")
        if stopper.update(val):
            best_state = copy.deepcopy(model.state_dict())
        row = {"epoch": epoch, "train_loss": sums["loss"] / N, "val_loss": val,
               "ce": sums["ce"] / N, "kl": sums["kl"] / N}
        rows.append(row)
        log.info("epoch %d train %.4f val %.4f ce %.4f kl %.4f", epoch, row["train_loss"], val, row["ce"], row["kl"])
        if on_epoch is not None:
            on_epoch(row)
        if stopper.should_stop:
            break
    model.load_state_dict(best_state)
    model.eval()
    return TrainResult(stopper.best_epoch, stopper.best, len(rows), rows, time.time() - t0)


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

class Predictor:
    """Uniform sampling interface over the model families."""

    stochastic = True

    def sample(self, x: Tensor, n: int, rng: np.random.Generator) -> np.ndarray:
        """Masks of shape (n_samples, B, H, W)."""
        raise NotImplementedError


class ProbUNetPredictor(Predictor):
    def __init__(self, model: ProbUNet):
        self.model = model

    def sample(self, x, n, rng):
        return predict_samples(self.model, x, n, rng)[0]


class MCDropoutPredictor(Predictor):
    def __init__(self, model: UNetModel):
        self.model = model

    def sample(self, x, n, rng):
        return mc_dropout_predict(self.model, x, n, rng)


class EnsemblePredictor(Predictor):
    """One sample per member, whatever ``n`` is."""

    def __init__(self, members: Sequence[UNetModel]):
        self.members = list(members)

    def sample(self, x, n, rng):
        return np.stack([unet_predict(m, x) for m in self.members])


class UNetPredictor(Predictor):
    stochastic = False

    def __init__(self, model: UNetModel):
        self.model = model

    def sample(self, x, n, rng):
        return unet_predict(self.model, x)[None]


class LabelPredictor(Predictor):
    """Debug predictor returning the rater masks themselves."""

    paired = True

    def __init__(self, ds: Dataset):
        self.ds = ds
        self._cursor = 0

    def sample(self, x, n, rng):
        B = x.shape[0]
        m = self.ds.masks[self._cursor:self._cursor + B]
        self._cursor += B
        return np.swapaxes(m, 0, 1)


@dataclass
class EvalRow:
    sample_id: str
    ged2: float
    cross: float
    pred_diversity: float
    label_diversity: float
    bucket: int


def evaluate(predictor: Predictor, test_ds: Dataset, stats: NormStats, n_samples: int, seed: int,
             batch_size: int = 16, label_raters: int | None = None) -> list[EvalRow]:
    """GED² rows for every test sample against all (or the first ``label_raters``) rater masks.

    Deterministic predictors yield only the cross term; GED² and prediction
    diversity are NaN for them.
    """
    rng = np.random.default_rng(seed)
    buckets = rater_agreement(test_ds.masks)
    rows: list[EvalRow] = []
    for start in range(0, len(test_ds), batch_size):
        idx = np.arange(start, min(start + batch_size, len(test_ds)))
        x = Tensor(np.stack([normalize(test_ds.images[i], stats) for i in idx])[:, None])
        preds = predictor.sample(x, n_samples, rng)
        for j, i in enumerate(idx):
            labels = test_ds.masks[i] if label_raters is None else test_ds.masks[i, :label_raters]
            sid = test_ds.ids[i]
            if predictor.stochastic and preds.shape[0] >= 2:
                rep: GedReport = ged(preds[:, j], labels, paired=getattr(predictor, "paired", False))
                rows.append(EvalRow(sid, rep.ged2, rep.cross, rep.pred_diversity, rep.label_diversity, int(buckets[i])))
            else:
                rows.append(EvalRow(sid, math.nan, cross_term(preds[0, j], labels), math.nan,
                                    label_diversity(labels), int(buckets[i])))
    return rows
