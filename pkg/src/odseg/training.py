"""Training loop over preprocessed cases."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from odseg import checkpoint as ckpt
from odseg.data import AugmentConfig, Volume, augment, sample_patch, zscore_normalize
from odseg.network import Network, SGDState, train_step, poly_lr

log = logging.getLogger(__name__)

LOSS_LOG_COLUMNS = ("step", "lr", "loss", "dice_term", "ce_term")


@dataclass
class TrainSettings:
    steps: int = 2000
    batch_size: int = 1
    seed: int = 0
    checkpoint_interval: int = 0  # 0: only the final checkpoint
    deterministic: bool = True
    threads: int = 1
    initial_lr: float = 1e-2
    momentum: float = 0.99
    clip_norm: float = 12.0
    foreground_bias: float = 0.5
    augment: bool = True


def prepare_case(volume: Volume, mask):
    return zscore_normalize(volume), mask


class Trainer:
    """Owns the network, optimizer state and data RNG for one run."""

    def __init__(self, net: Network, cases, settings: TrainSettings,
                 augment_cfg: AugmentConfig | None = None, state: SGDState | None = None,
                 rng_state=None):
        if not cases:
            raise ValueError("no training cases")
        self.net = net
        self.cases = cases
        self.settings = settings
        self.augment_cfg = augment_cfg or AugmentConfig()
        self.state = state or SGDState(total_steps=settings.steps, initial_lr=settings.initial_lr,
                                       momentum=settings.momentum, clip_norm=settings.clip_norm)
        self.rng = np.random.default_rng(settings.seed)
        if rng_state is not None:
            self.rng.bit_generator.state = rng_state
        self.history = []

    def next_batch(self):
        batch = []
        ps = self.net.config.patch_size
        for _ in range(self.settings.batch_size):
            vol, mask = self.cases[int(self.rng.integers(len(self.cases)))]
            vals, lab = sample_patch(vol, mask, ps, self.rng, self.settings.foreground_bias)
            if self.settings.augment:
                v, m = augment(Volume(vals, vol.spacing), lab, self.augment_cfg, self.rng)
                vals, lab = v.values, m.labels
            batch.append((vals, lab))
        return batch

    def step(self):
        lr = self.state.lr
        loss, dice_term, ce_term = train_step(self.net, self.next_batch(), self.state)
        row = (self.state.step, lr, loss, dice_term, ce_term)
        self.history.append(row)
        return row

    def run(self, until=None, on_step=None, checkpoint_path=None):
        until = self.state.total_steps if until is None else until
        interval = self.settings.checkpoint_interval
        while self.state.step < until:
            row = self.step()
            if on_step is not None:
                on_step(row)
            if checkpoint_path and interval and self.state.step % interval == 0:
                self.save(checkpoint_path)
        if checkpoint_path:
            self.save(checkpoint_path)
        return self.history

    def save(self, path):
        ckpt.save_checkpoint(self.net, self.state, path, rng_state=self.rng.bit_generator.state,
                             extra={"settings": vars(self.settings)})

    @classmethod
    def resume(cls, path, cases, settings, augment_cfg=None):
        net, state, meta = ckpt.load_checkpoint(path)
        if state is None:
            raise ckpt.CheckpointError("optimizer", "checkpoint carries no optimizer state")
        return cls(net, cases, settings, augment_cfg, state, meta.get("rng_state"))


def format_loss_row(row) -> str:
    step, lr, loss, dice_term, ce_term = row
    return f"{step}\t{lr:.8g}\t{loss:.8g}\t{dice_term:.8g}\t{ce_term:.8g}"


__all__ = ["Trainer", "TrainSettings", "prepare_case", "format_loss_row", "LOSS_LOG_COLUMNS",
           "poly_lr"]
