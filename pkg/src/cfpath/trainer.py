"""Momentum-contrast pretraining loop with sampling strategies.

One optimizer step per batch on the query branch, followed by one EMA
update of the key branch. Epochs are 1-indexed. All randomness derives
from ``config.seed`` and the epoch/step counters, so a resumed run
replays exactly the same batches and augmentations.
"""
import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .checkpoint import load_checkpoint, save_checkpoint
from .config import TrainConfig, validate_train_config
from .data.augment import AugmentationPolicy, two_views
from .data.dataset import Dataset, subsample_fraction
from .errors import DataError, EmptyResult, NonFiniteLoss
from .losses import symmetric_batch_loss
from .momentum import MomentumPair

log = logging.getLogger(__name__)

LOSS_HEADER = ("epoch", "step", "lr", "loss")


def lr_at(config, step, steps_per_epoch):
    """Linear warmup to ``base_lr``, then cosine decay to zero."""
    warmup = config.warmup_epochs * steps_per_epoch
    total = config.epochs * steps_per_epoch
    if step < warmup:
        return config.base_lr * step / warmup
    if total <= warmup:
        return config.base_lr
    progress = min(1.0, (step - warmup) / (total - warmup))
    return config.base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def momentum_at(config, step, total_steps):
    if not config.momentum_schedule:
        return config.m
    return 1.0 - (1.0 - config.m) * (math.cos(math.pi * step / max(total_steps, 1)) + 1.0) / 2.0


@dataclass
class TrainState:
    epoch: int = 0  # last completed epoch
    global_step: int = 0
    lr_current: float = 0.0
    loss_ema: float = float("nan")
    best_loss: float = float("inf")
    epoch_losses: list = field(default_factory=list)
    step_log: list = field(default_factory=list)  # (epoch, step, lr, loss, n_selected)
    lineage: list = field(default_factory=list)


def build_pair(config):
    torch.manual_seed(config.seed)
    return MomentumPair(config.encoder_config, dim=config.proj_dim, hidden=config.proj_hidden, m=config.m)


def build_optimizer(config, pair):
    return torch.optim.AdamW(list(pair.query_parameters()), lr=config.base_lr,
                             betas=(config.beta1, config.beta2), weight_decay=config.weight_decay)


class PatchPool:
    """All accepted patches of the selected slides, held in memory."""

    def __init__(self, dataset, manifests):
        self.pixels, self.slide_index = [], []
        for i, m in enumerate(manifests):
            px = dataset.load_patches(m)
            if len(px):
                self.pixels.append(px)
                self.slide_index.append(np.full(len(px), i))
        if not self.pixels:
            raise EmptyResult("no accepted patches in the selected slides")
        self.pixels = np.concatenate(self.pixels)
        self.slide_index = np.concatenate(self.slide_index)
        self.slide_ids = [m.slide_id for m in manifests]

    def __len__(self):
        return len(self.pixels)

    def epoch_order(self, seed, epoch, per_slide=0):
        """Patch indices for one epoch: optional per-slide sample, then a shuffle."""
        rng = np.random.default_rng([seed, epoch])
        if per_slide:
            chosen = []
            for s in np.unique(self.slide_index):
                idx = np.flatnonzero(self.slide_index == s)
                chosen.append(rng.choice(idx, size=min(per_slide, idx.size), replace=False))
            idx = np.sort(np.concatenate(chosen))
        else:
            idx = np.arange(len(self.pixels))
        return idx[rng.permutation(idx.size)]

    def steps_per_epoch(self, batch_size, per_slide=0):
        if per_slide:
            n = sum(min(per_slide, int(c)) for c in np.bincount(self.slide_index) if c)
        else:
            n = len(self.pixels)
        return n // batch_size


def _step_generator(seed, step):
    return torch.Generator().manual_seed(int(seed) * 1_000_003 + int(step))


def _diagnose(queries, keys, tau):
    q = torch.nn.functional.normalize(queries.detach().double(), dim=1)
    k = torch.nn.functional.normalize(keys.detach().double(), dim=1)
    sims = q @ k.T
    bad = torch.nonzero(~torch.isfinite(sims).all(dim=1))
    row = int(bad[0]) if len(bad) else 0
    return f"similarity row {row}: {sims[row].tolist()} (tau={tau})"


def train_step(state, pair, optimizer, batch, config, epoch, steps_per_epoch, total_steps,
               policy=None):
    """One optimizer step + EMA update on a uint8 (N, H, W, 3) batch; returns the loss."""
    policy = policy or AugmentationPolicy()
    lr = lr_at(config, state.global_step, steps_per_epoch)
    for group in optimizer.param_groups:
        group["lr"] = lr
    view_a, view_b, original = two_views(batch, policy, size=config.input_size,
                                         generator=_step_generator(config.seed, state.global_step))
    originals = None if config.originals == "view_a" else original
    qa, qb, ka, kb, ok = pair.embed_views(view_a, view_b, originals)
    loss, masks = symmetric_batch_loss(config.plan, epoch, qa, qb, ka, kb, ok,
                                       tau=config.tau, symmetrize=config.symmetrize)
    if not torch.isfinite(loss):
        raise NonFiniteLoss(f"non-finite loss at epoch {epoch}, step {state.global_step}; "
                            + _diagnose(qa, kb, config.tau))
    optimizer.zero_grad(set_to_none=True)
    loss.backward()
    optimizer.step()
    pair.ema_update(momentum_at(config, state.global_step, total_steps))
    value = float(loss.detach())
    n_selected = int(masks[0].sum() + masks[1].sum())
    state.step_log.append((epoch, state.global_step, lr, value, n_selected))
    state.global_step += 1
    state.lr_current = lr
    state.loss_ema = value if math.isnan(state.loss_ema) else 0.9 * state.loss_ema + 0.1 * value
    return value


def _pair_tensors(pair, optimizer):
    tensors = {f"model/{k}": v for k, v in pair.state_dict().items()}
    params = list(pair.query_parameters())
    for i, p in enumerate(params):
        st = optimizer.state.get(p)
        if st:
            tensors[f"optim/{i}/exp_avg"] = st["exp_avg"]
            tensors[f"optim/{i}/exp_avg_sq"] = st["exp_avg_sq"]
            tensors[f"optim/{i}/step"] = torch.as_tensor(st["step"], dtype=torch.float32).reshape(1)
    return tensors


def save_training_checkpoint(path, config, pair, optimizer, state):
    meta = {
        "epoch": state.epoch, "global_step": state.global_step, "m": pair.m,
        "lr_current": state.lr_current, "best_loss": state.best_loss,
        "epoch_losses": state.epoch_losses, "lineage": state.lineage + [Path(path).name],
    }
    return save_checkpoint(path, _pair_tensors(pair, optimizer), config.as_dict(), meta)


def config_from_dict(d):
    d = dict(d)
    if "depths" in d:
        d["depths"] = tuple(d["depths"])
    return TrainConfig(**d)


def load_pair(path):
    """Rebuild (config, pair, tensors, meta) from a training checkpoint."""
    tensors, cfg_dict, meta = load_checkpoint(path)
    config = config_from_dict(cfg_dict)
    pair = build_pair(config)
    model_state = {k[len("model/"):]: v for k, v in tensors.items() if k.startswith("model/")}
    own = pair.state_dict()
    for k, v in model_state.items():
        model_state[k] = v.to(own[k].dtype)
    pair.load_state_dict(model_state)
    return config, pair, tensors, meta


def _restore_optimizer(optimizer, pair, tensors):
    for i, p in enumerate(pair.query_parameters()):
        if f"optim/{i}/exp_avg" in tensors:
            optimizer.state[p] = {
                "step": torch.tensor(float(tensors[f"optim/{i}/step"][0])),
                "exp_avg": tensors[f"optim/{i}/exp_avg"].clone(),
                "exp_avg_sq": tensors[f"optim/{i}/exp_avg_sq"].clone(),
            }


def _write_loss_csv(path, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LOSS_HEADER)
        for r in rows:
            w.writerow([r[0], r[1], repr(float(r[2])), repr(float(r[3]))])


def read_loss_csv(path):
    with open(path, newline="", encoding="utf-8") as fh:
        return [(int(r["epoch"]), int(r["step"]), float(r["lr"]), float(r["loss"]))
                for r in csv.DictReader(fh)]


def run_pretraining(config, dataset, out_dir, resume=None, stop_after_epoch=None, policy=None):
    """Train on the internal cohort; return (final checkpoint path, loss CSV path).

    Writes ``loss.csv`` (one row per epoch), ``steps.csv`` (one row per
    step), ``checkpoint_final.ckpt``, ``checkpoint_best.ckpt`` and
    ``checkpoint_last.ckpt`` (resume point, rewritten every epoch).
    """
    validate_train_config(config)
    dataset = dataset if isinstance(dataset, Dataset) else Dataset(dataset)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifests = subsample_fraction(dataset.manifests("internal"), config.data_fraction, config.seed)
    pool = PatchPool(dataset, manifests)
    spe = pool.steps_per_epoch(config.batch_size, config.ssl_patches_per_slide)
    if spe < 1:
        raise DataError(f"{len(pool)} patches cannot fill one batch of {config.batch_size}")
    total_steps = spe * config.epochs
    torch.use_deterministic_algorithms(True, warn_only=True)

    state = TrainState()
    if resume is not None:
        saved_config, pair, tensors, meta = load_pair(resume)
        if saved_config != config:
            raise ValueError("resume checkpoint was trained with a different config")
        optimizer = build_optimizer(config, pair)
        _restore_optimizer(optimizer, pair, tensors)
        state.epoch, state.global_step = meta["epoch"], meta["global_step"]
        state.best_loss, state.epoch_losses = meta["best_loss"], [tuple(r) for r in meta["epoch_losses"]]
        state.lineage = meta["lineage"]
    else:
        pair = build_pair(config)
        optimizer = build_optimizer(config, pair)
    pair.train()

    log.info("pretraining %s: %d slides, %d patches, %d steps/epoch",
             config.plan.strategy.value, len(manifests), len(pool), spe)
    last = stop_after_epoch or config.epochs
    for epoch in range(state.epoch + 1, last + 1):
        order = pool.epoch_order(config.seed, epoch, config.ssl_patches_per_slide)
        losses = []
        for b in range(spe):
            batch = pool.pixels[order[b * config.batch_size:(b + 1) * config.batch_size]]
            losses.append(train_step(state, pair, optimizer, batch, config, epoch, spe, total_steps,
                                     policy))
        mean = float(np.mean(losses))
        state.epoch = epoch
        state.epoch_losses.append((epoch, state.global_step, state.lr_current, mean))
        log.info("epoch %d loss %.4f lr %.3g", epoch, mean, state.lr_current)
        if mean < state.best_loss:
            state.best_loss = mean
            save_training_checkpoint(out / "checkpoint_best.ckpt", config, pair, optimizer, state)
        save_training_checkpoint(out / "checkpoint_last.ckpt", config, pair, optimizer, state)

    _write_loss_csv(out / "loss.csv", state.epoch_losses)
    steps_path = out / "steps.csv"
    append = resume is not None and steps_path.exists()
    with open(steps_path, "a" if append else "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if not append:
            w.writerow(("epoch", "step", "lr", "loss", "selected"))
        w.writerows(state.step_log)
    final = out / "checkpoint_final.ckpt"
    if state.epoch == config.epochs:
        save_training_checkpoint(final, config, pair, optimizer, state)
    return (final if final.exists() else out / "checkpoint_last.ckpt"), out / "loss.csv"
