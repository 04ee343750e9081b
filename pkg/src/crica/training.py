"""Multi-similarity loss with online hard mining, place-balanced batch
sampling, Adam over the trainable parameters only, and the training loop.

Per anchor q with mined positive set P_q and negative set N_q the loss is

    (1/alpha) log[1 + sum_p exp(-alpha (S_qp - lambda))]
  + (1/beta)  log[1 + sum_n exp( beta  (S_qn - lambda))]

averaged over all B anchors; anchors with nothing mined contribute 0.
Mining keeps the violators near the decision boundary: negatives scoring
above the weakest positive minus the margin, positives scoring below the
strongest negative plus the margin. Anchors whose place has a single image
in the batch are skipped, not errored.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from . import tensor as T
from .errors import InsufficientPlaces, NonUnitRows, ShapeMismatch
from .model import Model, TrainState, forward_descriptors
from .tensor import Tape, Tensor


@dataclass(frozen=True)
class MsHyper:
    alpha: float = 1.0
    beta: float = 50.0
    lam: float = 0.0
    margin: float = 0.1

    def __post_init__(self):
        if self.alpha <= 0 or self.beta <= 0:
            raise ValueError("alpha and beta must be positive")


@dataclass
class TrainBatch:
    images: np.ndarray   # (P*K, 3, H, W)
    labels: np.ndarray   # (P*K,) place ids, K per place
    ids: list[str]


def cosine_sim_matrix(desc: Tensor) -> Tensor:
    """S = D D^T for unit-norm rows; symmetric with unit diagonal."""
    norms = np.linalg.norm(desc.data, axis=1)
    if np.max(np.abs(norms - 1.0)) > 1e-4:
        raise NonUnitRows(f"rows are not unit-norm (max deviation {np.max(np.abs(norms - 1.0)):.2e})")
    return T.matmul(desc, T.transpose(desc, (1, 0)))


def ms_mine(sims: np.ndarray, labels: np.ndarray, margin: float) -> tuple[np.ndarray, np.ndarray]:
    """Per-anchor hard-pair masks over the similarity matrix.

    Keeps negatives with S_qn > min_p S_qp - margin and positives with
    S_qp < max_n S_qn + margin; the anchor is excluded from its own
    positives. Anchors lacking positives or negatives get empty masks.
    """
    if sims.ndim != 2 or sims.shape[0] != sims.shape[1]:
        raise ShapeMismatch(f"similarity matrix must be square, got {sims.shape}")
    b = sims.shape[0]
    labels = np.asarray(labels)
    pos_mask = np.zeros((b, b), dtype=bool)
    neg_mask = np.zeros((b, b), dtype=bool)
    for q in range(b):
        same = labels == labels[q]
        same[q] = False
        diff = ~same
        diff[q] = False
        if not same.any() or not diff.any():
            continue  # singleton place or single-place batch: anchor skipped
        min_pos = sims[q][same].min()
        max_neg = sims[q][diff].max()
        neg_mask[q] = diff & (sims[q] > min_pos - margin)
        pos_mask[q] = same & (sims[q] < max_neg + margin)
    return pos_mask, neg_mask


def ms_loss(sims: Tensor, hyper: MsHyper, masks: tuple[np.ndarray, np.ndarray]) -> Tensor:
    """Vectorized loss over a mined similarity matrix; differentiable in S."""
    pos_mask, neg_mask = masks
    dtype = sims.dtype
    pos_e = T.mul(T.exp(T.mul(T.sub(hyper.lam, sims), hyper.alpha)), pos_mask.astype(dtype))
    pos_term = T.mul(T.log(T.add(T.tsum(pos_e, axis=1), 1.0)), 1.0 / hyper.alpha)
    neg_e = T.mul(T.exp(T.mul(T.sub(sims, hyper.lam), hyper.beta)), neg_mask.astype(dtype))
    neg_term = T.mul(T.log(T.add(T.tsum(neg_e, axis=1), 1.0)), 1.0 / hyper.beta)
    return T.tmean(T.add(pos_term, neg_term))


def ms_loss_brute(sims: np.ndarray, hyper: MsHyper,
                  masks: tuple[np.ndarray, np.ndarray]) -> float:
    """Per-pair reference evaluation; the oracle for the vectorized path."""
    pos_mask, neg_mask = masks
    b = sims.shape[0]
    total = 0.0
    for q in range(b):
        pos_sum = 0.0
        neg_sum = 0.0
        for j in range(b):
            if pos_mask[q, j]:
                pos_sum += math.exp(-hyper.alpha * (sims[q, j] - hyper.lam))
            if neg_mask[q, j]:
                neg_sum += math.exp(hyper.beta * (sims[q, j] - hyper.lam))
        total += math.log1p(pos_sum) / hyper.alpha + math.log1p(neg_sum) / hyper.beta
    return total / b


# ---------------------------------------------------------------------------
# batching
# ---------------------------------------------------------------------------

@dataclass
class PlaceGroup:
    place_id: int
    ids: list[str]
    images: np.ndarray  # (k, 3, H, W) float32


class GroupedDataset:
    """Training images grouped by place id."""

    def __init__(self, groups: Sequence[PlaceGroup]):
        self.groups = list(groups)

    def eligible(self, k: int) -> list[PlaceGroup]:
        return [g for g in self.groups if len(g.ids) >= k]

    def __len__(self):
        return len(self.groups)


def sample_batch(dataset: GroupedDataset, p: int, k: int,
                 rng: np.random.Generator) -> TrainBatch:
    """P distinct places, K distinct images each, uniform without replacement."""
    eligible = dataset.eligible(k)
    if len(eligible) < p:
        raise InsufficientPlaces(f"need {p} places with >= {k} images, have {len(eligible)}")
    chosen = rng.choice(len(eligible), size=p, replace=False)
    return _gather([eligible[i] for i in chosen], k, rng)


def _gather(groups: Sequence[PlaceGroup], k: int, rng: np.random.Generator) -> TrainBatch:
    images, labels, ids = [], [], []
    for group in groups:
        take = rng.choice(len(group.ids), size=k, replace=False)
        images.append(group.images[take])
        labels.extend([group.place_id] * k)
        ids.extend(group.ids[i] for i in take)
    return TrainBatch(images=np.concatenate(images, axis=0),
                      labels=np.asarray(labels), ids=ids)


def epoch_batches(dataset: GroupedDataset, p: int, k: int,
                  rng: np.random.Generator):
    """Shuffled partition of the eligible places into batches of P, covering
    the dataset once per epoch. A leftover chunk still forms a batch if it
    has at least two places."""
    eligible = dataset.eligible(k)
    if len(eligible) < min(p, 2):
        raise InsufficientPlaces(f"need at least {min(p, 2)} places with >= {k} images")
    order = rng.permutation(len(eligible))
    chunks = [list(order[start:start + p]) for start in range(0, len(order), p)]
    if len(chunks) > 1 and len(chunks[-1]) < 2:
        chunks[-2].extend(chunks.pop())  # a lone place cannot form pairs
    for chunk in chunks:
        yield _gather([eligible[i] for i in chunk], k, rng)


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

class Adam:
    """Standard Adam (beta1=0.9, beta2=0.999, eps=1e-8) over trainable params."""

    def __init__(self, params: Sequence[Tensor], beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self, lr: float) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            if g.shape != p.shape:
                raise ShapeMismatch(f"gradient shape {g.shape} != param {p.shape}")
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            p.zero_grad()


def adam_step(params: Sequence[Tensor], grads: Sequence[np.ndarray],
              state: Adam, lr: float) -> None:
    """Single functional update: installs ``grads`` and advances ``state``."""
    for p, g in zip(params, grads):
        p._grad = np.asarray(g, dtype=p.dtype)
    state.step(lr)


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    places_per_batch: int = 16
    images_per_place: int = 4
    lr: float = 1e-4
    lr_decay: float = 0.5
    lr_step_epochs: int = 3
    epochs: int = 10
    early_stop: bool = False
    patience: int = 3
    infer_batch: int = 16
    seed: int = 0


@dataclass
class EpochRecord:
    epoch: int
    mean_loss: float
    lr: float
    val_r1: Optional[float] = None
    val_r5: Optional[float] = None

    def line(self) -> str:
        r1 = "-" if self.val_r1 is None else f"{self.val_r1:.2f}"
        r5 = "-" if self.val_r5 is None else f"{self.val_r5:.2f}"
        return f"epoch={self.epoch} loss={self.mean_loss:.6f} lr={self.lr:.6g} R@1={r1} R@5={r5}"


def schedule_lr(base_lr: float, epoch: int, decay: float, step_epochs: int) -> float:
    return base_lr * decay ** (epoch // step_epochs)


def train(model: Model, dataset: GroupedDataset, cfg: TrainConfig,
          hyper: MsHyper,
          val_fn: Optional[Callable[[Model], tuple[float, float]]] = None,
          log_fn: Optional[Callable[[str], None]] = None,
          resume: Optional[TrainState] = None,
          start_epoch: int = 0) -> tuple[list[EpochRecord], TrainState]:
    """Train the adapters, GeM exponent and cross-image encoder.

    One epoch covers the dataset once in place-balanced batches; the
    learning rate halves every ``lr_step_epochs`` epochs. With
    ``early_stop``, training stops once validation R@5 has not improved for
    ``patience`` epochs.
    """
    params = model.trainable_params()
    optimizer = Adam(params)
    if resume is not None:
        optimizer.t = resume.step
        optimizer.m = [m.copy() for m in resume.moments1]
        optimizer.v = [v.copy() for v in resume.moments2]
        start_epoch = resume.epoch
    rng = np.random.default_rng([cfg.seed, 3, start_epoch])
    records: list[EpochRecord] = []
    best_r5 = -1.0
    stale = 0
    lr = schedule_lr(cfg.lr, start_epoch, cfg.lr_decay, cfg.lr_step_epochs)
    for epoch in range(start_epoch, cfg.epochs):
        lr = schedule_lr(cfg.lr, epoch, cfg.lr_decay, cfg.lr_step_epochs)
        losses = []
        for batch in epoch_batches(dataset, cfg.places_per_batch,
                                   cfg.images_per_place, rng):
            with Tape() as tape:
                desc = forward_descriptors(model, Tensor(batch.images))
                sims = cosine_sim_matrix(desc)
                masks = ms_mine(sims.data, batch.labels, hyper.margin)
                loss = ms_loss(sims, hyper, masks)
            tape.backward()
            optimizer.step(lr)
            model.clamp_constraints()
            losses.append(float(loss.data))
        record = EpochRecord(epoch=epoch, mean_loss=float(np.mean(losses)), lr=lr)
        if val_fn is not None:
            record.val_r1, record.val_r5 = val_fn(model)
        records.append(record)
        if log_fn is not None:
            log_fn(record.line())
        if cfg.early_stop and record.val_r5 is not None:
            if record.val_r5 > best_r5:
                best_r5 = record.val_r5
                stale = 0
            else:
                stale += 1
                if stale >= cfg.patience:
                    break
    state = TrainState(epoch=len(records) + start_epoch, step=optimizer.t, lr=lr,
                       moments1=optimizer.m, moments2=optimizer.v)
    return records, state
