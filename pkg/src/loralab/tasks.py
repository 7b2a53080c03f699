"""Synthetic objectives for desk-scale adapter training.

TeacherTask hides low-rank deltas inside a copy of the base model's query and
value projections and asks the student to match the perturbed model's logits
(MSE). The hidden delta for module m at layer l is

    delta* = scale * (W0^T theta_B*) (W0 theta_A*)^T,   scale = 0.5 / sqrt(d)

with one Gaussian (theta_A*, theta_B*) pair per module shared by all layers.
Conditioning the hidden deltas on each layer's own frozen weights gives the
task a genuine cross-layer structure: per-layer rank-r adapters can fit it,
a single shared linear map can fit it, and weight-space analysis of a trained
run has an actual commonality to detect. Independent per-layer deltas would
make the layer-similarity analysis a pure noise measurement.

ParityTask is a sanity classification task: label 1 when a designated marker
token appears an even number of times (zero included), else 0.

Both tasks draw batches statelessly from counter-derived streams, so batch t
of a given task is a pure function of (seed, t).
"""

from __future__ import annotations

import math

import numpy as np

from . import _rng, model
from .model import BaseWeights

TASK_KINDS = ("teacher", "parity")


def _token_batch(config, seed: int, label: str, batch_size: int, seq_len: int) -> np.ndarray:
    stream = _rng.derive_seed(seed, f"tokens.{label}")
    flat = _rng.randint_block(batch_size * seq_len, config.vocab_size, stream)
    return flat.reshape(batch_size, seq_len)


class TeacherTask:
    loss_kind = "mse"

    def __init__(self, weights: BaseWeights, rank: int, seed: int, seq_len: int = 16,
                 delta_scale: float | None = None):
        config = weights.config
        if not 1 <= seq_len <= config.max_len:
            raise ValueError(f"seq_len {seq_len} outside [1, {config.max_len}]")
        if rank < 0 or rank > config.d_model:
            raise ValueError(f"teacher rank {rank} outside [0, {config.d_model}]")
        d = config.d_model
        scale = 0.5 / math.sqrt(d) if delta_scale is None else delta_scale
        updates: dict[str, np.ndarray] = {}
        for m in ("query", "value"):
            if rank == 0:
                continue
            theta_a = _rng.gaussian_block(d * rank, _rng.derive_seed(seed, f"teacher.{m}.thetaA"))
            theta_b = _rng.gaussian_block(d * rank, _rng.derive_seed(seed, f"teacher.{m}.thetaB"))
            theta_a = theta_a.reshape(d, rank)
            theta_b = theta_b.reshape(d, rank)
            for l in range(1, config.n_layers + 1):
                w0 = weights.projection(m, l)
                delta = scale * ((w0.T @ theta_b) @ (w0 @ theta_a).T)
                updates[f"layer{l}.{m}"] = w0 + delta
        self._teacher = weights.replace(updates) if updates else weights
        self._config = config
        self.rank = rank
        self.seed = seed
        self.seq_len = seq_len

    def batch(self, index, batch_size: int) -> tuple[np.ndarray, np.ndarray]:
        tokens = _token_batch(self._config, self.seed, str(index), batch_size, self.seq_len)
        targets, _ = model.forward(self._teacher, None, tokens)
        return tokens, targets

    def eval_batch(self, batch_size: int) -> tuple[np.ndarray, np.ndarray]:
        return self.batch("eval", batch_size)


class ParityTask:
    loss_kind = "cross_entropy"
    marker_token = 0

    def __init__(self, weights: BaseWeights, seed: int, seq_len: int = 16):
        config = weights.config
        if config.n_outputs < 2:
            raise ValueError(f"parity needs n_outputs >= 2, got {config.n_outputs}")
        if not 1 <= seq_len <= config.max_len:
            raise ValueError(f"seq_len {seq_len} outside [1, {config.max_len}]")
        self._config = config
        self.seed = seed
        self.seq_len = seq_len

    def batch(self, index, batch_size: int) -> tuple[np.ndarray, np.ndarray]:
        tokens = _token_batch(self._config, self.seed, str(index), batch_size, self.seq_len)
        counts = (tokens == self.marker_token).sum(axis=1)
        labels = np.where(counts % 2 == 0, 1, 0).astype(np.int64)
        return tokens, labels

    def eval_batch(self, batch_size: int) -> tuple[np.ndarray, np.ndarray]:
        return self.batch("eval", batch_size)


def build_task(kind: str, weights: BaseWeights, seed: int, rank: int = 4,
               seq_len: int = 16, delta_scale: float | None = None):
    if kind == "teacher":
        return TeacherTask(weights, rank, seed, seq_len, delta_scale)
    if kind == "parity":
        return ParityTask(weights, seed, seq_len)
    raise ValueError(f"unknown task kind {kind!r}, expected one of {TASK_KINDS}")
