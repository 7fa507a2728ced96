"""Training over all NxN source-target view pairs of nominal instances."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .encoders import InstanceFeatures, ViewSample
from .model import EmptyPairError, ModMapModel, pair_loss
from .nn import NumericError, OneCycleSchedule, adam_init, adam_step, lr_at


@dataclass(frozen=True)
class TrainConfig:
    """Optimization settings; one optimizer step per batch of view pairs."""

    epochs: int = 200
    pairs_per_batch: int = 48
    lr_init: float = 1e-4
    lr_max: float = 5e-4
    lr_final: float = 1e-6
    warmup_fraction: float = 0.10
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.pairs_per_batch < 1:
            raise ValueError("pairs_per_batch must be >= 1")


def _as_features(sample, model: ModMapModel) -> InstanceFeatures:
    if isinstance(sample, InstanceFeatures):
        return sample
    if sample and isinstance(sample[0], ViewSample):
        return InstanceFeatures.from_views(sample, model.encoder_config)
    raise TypeError("expected InstanceFeatures or a list of ViewSample")


def train(model: ModMapModel, sample, cfg: TrainConfig) -> list[float]:
    """Fit the model on the views of a single nominal instance.

    Every epoch visits all n_views x n_views ordered (source, target)
    pairs once, in a seeded permutation. Returns per-epoch mean pair
    loss.
    """
    features = _as_features(sample, model)
    return _train_pairs(model, [features], cfg)


def train_multiclass(model: ModMapModel, samples, cfg: TrainConfig) -> list[float]:
    """Fit one conditioned model on one nominal instance per class.

    With a single class this is exactly class-agnostic training (the
    class code carries no information and is dropped at model build).
    """
    features = [_as_features(s, model) for s in samples]
    if len(features) >= 2 and model.n_classes != len(features):
        raise ValueError(
            f"model conditioned on {model.n_classes} classes, got {len(features)} samples"
        )
    widths = {(f.image[0].shape[1], f.depth[0].shape[1]) for f in features}
    if len(widths) > 1:
        raise ValueError(f"classes have differing channel counts: {sorted(widths)}")
    return _train_pairs(model, features, cfg)


def _train_pairs(model: ModMapModel, features_list: list[InstanceFeatures], cfg: TrainConfig) -> list[float]:
    n = model.n_views
    for f in features_list:
        if f.n_views != n:
            raise ValueError(f"sample has {f.n_views} views, model expects {n}")
    multiclass = model.n_classes >= 2
    pairs = [
        (ci, s, t)
        for ci in range(len(features_list))
        for s in range(n)
        for t in range(n)
    ]
    if cfg.epochs == 0:
        return []
    batches_per_epoch = math.ceil(len(pairs) / cfg.pairs_per_batch)
    schedule = OneCycleSchedule(
        total_steps=max(2, cfg.epochs * batches_per_epoch),
        warmup_fraction=cfg.warmup_fraction,
        lr_init=cfg.lr_init,
        lr_max=cfg.lr_max,
        lr_final=cfg.lr_final,
    )
    params = model.parameters()
    names = [name for name, _ in model.named_parameters()]
    state = adam_init(params)
    rng = np.random.default_rng(cfg.seed)
    history: list[float] = []
    step = 0
    for _ in range(cfg.epochs):
        order = rng.permutation(len(pairs))
        epoch_losses: list[float] = []
        for start in range(0, len(order), cfg.pairs_per_batch):
            batch = order[start : start + cfg.pairs_per_batch]
            acc = [np.zeros_like(p, dtype=np.float64) for p in params]
            used = 0
            for idx in batch:
                ci, s, t = pairs[idx]
                try:
                    loss, grads, _ = pair_loss(
                        model, features_list[ci], s, t,
                        class_index=ci if multiclass else None,
                    )
                except EmptyPairError:
                    continue
                if not math.isfinite(loss):
                    raise NumericError(f"non-finite loss on pair (class={ci}, s={s}, t={t})")
                for a, g in zip(acc, grads):
                    a += g
                epoch_losses.append(loss)
                used += 1
            if used:
                mean_grads = [a / used for a in acc]
                adam_step(params, mean_grads, state, lr_at(schedule, step), names)
            step += 1
        history.append(float(np.mean(epoch_losses)) if epoch_losses else float("nan"))
    return history
