"""
Trainer - mask-aware mini-batch SGD with a seed-determined batch schedule
"""
import logging
from typing import Iterable, Optional

import numpy as np

from common.errors import DivergenceError, InvalidSpecError
from network.mlp import (SHUFFLE_STREAM, DenseParams, LayerSpec, Mask, TrainConfig,
                         TrainResult, evaluate, forward_pass, gradients, loss_from_logits)

log = logging.getLogger("Trainer")


def _as_sinks(recorder):
    if recorder is None:
        return []
    if isinstance(recorder, (list, tuple)):
        return list(recorder)
    return [recorder]


class Trainer:
    """Runs one training session; every step is a pure function of (seed, config, data)"""

    def __init__(self, spec: LayerSpec, params0: DenseParams, mask: Optional[Mask], data,
                 cfg: TrainConfig, recorder=None, max_epochs: Optional[int] = None):
        params0.check(spec)
        self.mask = mask if mask is not None else Mask.ones(spec)
        self.mask.check(spec)
        if cfg.batch_size > len(data.train.labels):
            raise InvalidSpecError(
                f"batch_size {cfg.batch_size} exceeds training set size {len(data.train.labels)}")

        self.spec = spec
        self.data = data
        self.cfg = cfg
        self.sinks = _as_sinks(recorder)
        self.max_epochs = min(cfg.max_epochs, max_epochs) if max_epochs else cfg.max_epochs

        # Pruned entries start at exactly zero and stay there
        self.params = params0.copy()
        for w, k in zip(self.params.weights, self.mask.keep):
            w[k == 0] = 0.0

        self.iteration = 0
        self.loss_history = []

    def _emit(self):
        for sink in self.sinks:
            sink.record(self.iteration, self.params)

    def _full_loss(self):
        X = self.data.train.features
        _, logits = forward_pass(self.spec, self.params, self.mask, X)
        return loss_from_logits(self.spec, logits, self.data.train.labels)

    def _step(self, X, y, epoch):
        loss, grad_w, grad_b = gradients(self.spec, self.params, self.mask, X, y)
        if not np.isfinite(loss):
            raise DivergenceError(
                f"Non-finite loss at epoch {epoch}, iteration {self.iteration + 1} "
                f"(learning_rate={self.cfg.learning_rate})",
                epoch=epoch, iteration=self.iteration + 1)
        lr = self.cfg.learning_rate
        for i in range(self.spec.n_layers):
            self.params.weights[i] -= lr * grad_w[i]
            self.params.biases[i] -= lr * grad_b[i]
        self.iteration += 1
        self._emit()

    def run(self) -> TrainResult:
        X, y = self.data.train.features, self.data.train.labels
        n = len(y)
        rng = np.random.default_rng([self.cfg.seed, SHUFFLE_STREAM])

        log.debug(f"Training {self.spec.label()} for up to {self.max_epochs} epochs "
                  f"(lr={self.cfg.learning_rate}, batch={self.cfg.batch_size})")
        self._emit()

        previous = self._full_loss()
        stalled = 0
        converged = False
        epoch = 0
        for epoch in range(1, self.max_epochs + 1):
            order = rng.permutation(n)
            for start in range(0, n, self.cfg.batch_size):
                batch = order[start:start + self.cfg.batch_size]
                self._step(X[batch], y[batch], epoch)

            loss = self._full_loss()
            if not np.isfinite(loss):
                raise DivergenceError(f"Non-finite training loss after epoch {epoch}",
                                      epoch=epoch, iteration=self.iteration)
            self.loss_history.append(loss)
            log.debug(f"Epoch {epoch}: loss={loss:.6f}")

            if previous - loss < self.cfg.convergence_tol:
                stalled += 1
            else:
                stalled = 0
            previous = loss
            if stalled >= self.cfg.patience:
                converged = True
                break

        accuracy, f1, per_class = evaluate(self.params, self.mask, self.data.test, spec=self.spec)
        log.info(f"Stopped after {epoch} epochs ({self.iteration} iterations), "
                 f"test accuracy={accuracy:.4f}, f1={f1:.4f}")
        return TrainResult(final_params=self.params.copy(), epochs_run=epoch,
                           loss_history=self.loss_history, accuracy=accuracy, f1=f1,
                           per_class_f1=per_class, iterations=self.iteration,
                           converged=converged)


def train(spec: LayerSpec, params0: DenseParams, mask: Optional[Mask], data, cfg: TrainConfig,
          recorder=None, max_epochs: Optional[int] = None) -> TrainResult:
    """
    Mini-batch SGD from params0 under mask.
    recorder: sink (or list of sinks) with record(iteration, params), called
    with iteration 0 = initial parameters and once after every step.
    """
    return Trainer(spec, params0, mask, data, cfg, recorder, max_epochs).run()


def iterations_per_epoch(n_train, batch_size):
    return -(-n_train // batch_size)


def batch_schedule(seed, n_train, batch_size, epochs) -> Iterable[np.ndarray]:
    """The exact batch index sequence train() will use for a given seed"""
    rng = np.random.default_rng([seed, SHUFFLE_STREAM])
    for _ in range(epochs):
        order = rng.permutation(n_train)
        for start in range(0, n_train, batch_size):
            yield order[start:start + batch_size]
