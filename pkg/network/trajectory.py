"""
Trajectory - per-connection weight recording, perturbed replay, difference
series, windowing and per-window accuracy
"""
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, List, NamedTuple, Optional, Sequence, Union

import numpy as np
import pandas as pd

from common.errors import (DimensionMismatchError, InvalidSpecError, OutOfOrderIterationError,
                           SeriesTooShortError)
from common.protocol import pack_trajectory, unpack_trajectory
from network.mlp import DenseParams, LayerSpec, Mask, TrainConfig, TrainResult, predict_labels
from network.trainer import iterations_per_epoch, train

log = logging.getLogger("Trajectory")


class ConnectionId(NamedTuple):
    """1-based (layer, to, from); ConnectionId(1, 1, 1) is weights[0][0, 0]"""
    layer: int
    to: int
    source: int

    @property
    def label(self):
        return f"{self.layer}.{self.to}.{self.source}"

    @property
    def index(self):
        return self.layer - 1, self.to - 1, self.source - 1

    def check(self, spec: LayerSpec):
        if not 1 <= self.layer <= spec.n_layers:
            raise DimensionMismatchError(f"Connection {self.label}: no layer {self.layer}")
        rows, cols = spec.shapes[self.layer - 1]
        if not (1 <= self.to <= rows and 1 <= self.source <= cols):
            raise DimensionMismatchError(f"Connection {self.label} outside layer shape {rows}x{cols}")

    @classmethod
    def parse(cls, label):
        layer, to, source = (int(part) for part in label.split("."))
        return cls(layer, to, source)


FIRST_CONNECTION = ConnectionId(1, 1, 1)


def all_connections(spec: LayerSpec) -> List[ConnectionId]:
    """Every connection in (layer, to, from) lexicographic order"""
    return [ConnectionId(layer, to, source)
            for layer, (rows, cols) in enumerate(spec.shapes, start=1)
            for to in range(1, rows + 1)
            for source in range(1, cols + 1)]


def sample_connections(spec: LayerSpec, n_sample, seed=0) -> List[ConnectionId]:
    """
    Tracking subset for large nets: a random sample of hidden-layer
    connections plus every output-layer connection, in lexicographic order.
    """
    connections = all_connections(spec)
    output = [c for c in connections if c.layer == spec.n_layers]
    inner = [c for c in connections if c.layer != spec.n_layers]
    if n_sample >= len(inner):
        return connections
    if n_sample < 1:
        return output
    # The perturbed connection is always tracked
    rest = inner[1:]
    rng = np.random.default_rng(seed)
    picked = np.sort(rng.choice(len(rest), size=n_sample - 1, replace=False))
    return [FIRST_CONNECTION] + [rest[i] for i in picked] + output


# ============================================================================
# Trajectory Store
# ============================================================================

class TrajectoryStore:
    """
    Column store of weight values, one series per tracked connection.
    Used as a training sink: record(iteration, params) appends one row.
    """

    def __init__(self, spec: LayerSpec, run_id="run", connections: Optional[Sequence] = None,
                 stop_after: Optional[int] = None):
        self.spec = spec
        self.run_id = run_id
        self.connections = [ConnectionId(*c) for c in
                            (connections if connections is not None else all_connections(spec))]
        for conn in self.connections:
            conn.check(spec)
        self.column = {conn: i for i, conn in enumerate(self.connections)}
        self.stop_after = stop_after

        offsets = np.cumsum([0] + [r * c for r, c in spec.shapes])
        self._positions = np.array(
            [offsets[c.layer - 1] + (c.to - 1) * spec.shapes[c.layer - 1][1] + (c.source - 1)
             for c in self.connections], dtype=np.int64)

        self._rows: List[np.ndarray] = []
        self._iterations: List[int] = []
        self._values: Optional[np.ndarray] = None

    def record(self, iteration, params: DenseParams):
        if self._iterations and iteration <= self._iterations[-1]:
            raise OutOfOrderIterationError(
                f"Iteration {iteration} recorded after {self._iterations[-1]}")
        if self.stop_after is not None and iteration > self.stop_after:
            return
        flat = np.concatenate([w.ravel() for w in params.weights])
        self._rows.append(flat[self._positions].copy())
        self._iterations.append(int(iteration))
        self._values = None

    @property
    def n_iterations(self):
        return len(self._iterations)

    @property
    def iterations(self):
        return np.asarray(self._iterations, dtype=np.int64)

    @property
    def values(self) -> np.ndarray:
        """(n_iterations, n_connections) matrix"""
        if self._values is None:
            if self._rows:
                self._values = np.vstack(self._rows)
            else:
                self._values = np.zeros((0, len(self.connections)))
        return self._values

    def series(self, connection) -> np.ndarray:
        return self.values[:, self.column[ConnectionId(*connection)]]

    def truncate(self, n_iterations):
        """Keep only the first n_iterations rows"""
        self._rows = self._rows[:n_iterations]
        self._iterations = self._iterations[:n_iterations]
        self._values = None

    def save(self, path):
        Path(path).write_bytes(pack_trajectory(self.run_id, self.connections,
                                               self.iterations, self.values))

    @classmethod
    def load(cls, path, spec: LayerSpec):
        run_id, connections, iterations, values = unpack_trajectory(Path(path).read_bytes())
        store = cls(spec, run_id, connections)
        store._rows = list(values)
        store._iterations = [int(i) for i in iterations]
        store._values = values
        return store

    def to_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame(self.values, columns=[c.label for c in self.connections])
        frame.index = pd.Index(self.iterations, name="iteration")
        return frame

    def to_csv(self, path):
        self.to_frame().to_csv(path, float_format="%.17g")


# ============================================================================
# Difference Series / Windows
# ============================================================================

@dataclass
class DiffSeries:
    connection: ConnectionId
    values: np.ndarray


@dataclass
class WindowedSeries:
    window_len: int
    windows: np.ndarray  # (K, W)
    source: Optional[ConnectionId] = None

    @property
    def n_windows(self):
        return len(self.windows)


def diff(base: TrajectoryStore, pert: TrajectoryStore) -> List[DiffSeries]:
    """baseline - perturbed, per connection, over the common iteration count"""
    if base.connections != pert.connections:
        raise DimensionMismatchError("Baseline and perturbed stores track different connections")
    n = min(base.n_iterations, pert.n_iterations)
    delta = base.values[:n] - pert.values[:n]
    return [DiffSeries(conn, delta[:, i].copy()) for i, conn in enumerate(base.connections)]


def window(series, window_len, source: Optional[ConnectionId] = None) -> WindowedSeries:
    """K = floor(len / W) disjoint windows; the trailing remainder is dropped"""
    series = np.asarray(series, dtype=np.float64)
    if window_len < 1:
        raise InvalidSpecError("window_len must be >= 1")
    if len(series) < window_len:
        raise SeriesTooShortError(f"Series of length {len(series)} is shorter than window {window_len}")
    k = len(series) // window_len
    return WindowedSeries(window_len, series[:k * window_len].reshape(k, window_len).copy(), source)


# ============================================================================
# Accuracy per Window
# ============================================================================

@dataclass
class AccuracySeries:
    train_accuracy: np.ndarray
    test_accuracy: np.ndarray
    iterations: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def __len__(self):
        return len(self.train_accuracy)

    def misclassification(self, source="train") -> np.ndarray:
        if source == "train":
            return 1.0 - self.train_accuracy
        if source == "test":
            return 1.0 - self.test_accuracy
        raise InvalidSpecError(f"Unknown misclassification source {source!r}")

    def truncate(self, n_windows):
        return AccuracySeries(self.train_accuracy[:n_windows], self.test_accuracy[:n_windows],
                              self.iterations[:n_windows])

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({'window_index': np.arange(len(self)),
                             'iteration': self.iterations,
                             'train_accuracy': self.train_accuracy,
                             'test_accuracy': self.test_accuracy})

    @classmethod
    def from_frame(cls, frame: pd.DataFrame):
        frame = frame.sort_values('window_index')
        return cls(frame['train_accuracy'].to_numpy(dtype=np.float64),
                   frame['test_accuracy'].to_numpy(dtype=np.float64),
                   frame['iteration'].to_numpy(dtype=np.int64))


def _accuracy(spec, params, mask, dataset):
    preds = predict_labels(spec, params, mask, dataset.features)
    return float(np.mean(preds == dataset.labels))


def window_end(window_index, window_len):
    """Iteration of the last iterate in a window"""
    return (window_index + 1) * window_len - 1


def accuracy_per_window(snapshots, data, window_len, spec: LayerSpec, mask: Optional[Mask] = None,
                        n_windows: Optional[int] = None) -> AccuracySeries:
    """
    snapshots: (iteration, params) pairs taken at the last iterate of each
    window, in order.
    """
    snapshots = list(snapshots)
    if n_windows is not None and len(snapshots) != n_windows:
        raise DimensionMismatchError(f"{len(snapshots)} snapshots for {n_windows} windows")
    train_acc, test_acc, iterations = [], [], []
    for l, (iteration, params) in enumerate(snapshots):
        if iteration != window_end(l, window_len):
            raise DimensionMismatchError(
                f"Snapshot {l} at iteration {iteration}, expected {window_end(l, window_len)}")
        train_acc.append(_accuracy(spec, params, mask, data.train))
        test_acc.append(_accuracy(spec, params, mask, data.test))
        iterations.append(iteration)
    return AccuracySeries(np.array(train_acc), np.array(test_acc), np.array(iterations, dtype=np.int64))


class WindowAccuracyRecorder:
    """Training sink that evaluates train/test accuracy at every window boundary"""

    def __init__(self, spec: LayerSpec, data, window_len, mask: Optional[Mask] = None,
                 stop_after: Optional[int] = None):
        self.spec = spec
        self.data = data
        self.window_len = window_len
        self.mask = mask
        self.stop_after = stop_after
        self._train, self._test, self._iterations = [], [], []

    def record(self, iteration, params: DenseParams):
        if self.stop_after is not None and iteration > self.stop_after:
            return
        if (iteration + 1) % self.window_len == 0:
            self._train.append(_accuracy(self.spec, params, self.mask, self.data.train))
            self._test.append(_accuracy(self.spec, params, self.mask, self.data.test))
            self._iterations.append(iteration)

    def series(self) -> AccuracySeries:
        return AccuracySeries(np.array(self._train), np.array(self._test),
                              np.array(self._iterations, dtype=np.int64))


# ============================================================================
# Perturbed Replay
# ============================================================================

@dataclass
class Replay:
    base: TrajectoryStore
    pert: TrajectoryStore
    base_result: TrainResult
    pert_result: TrainResult
    probe_epochs: Optional[int] = None


def perturb(params: DenseParams, connection: ConnectionId, delta) -> DenseParams:
    perturbed = params.copy()
    layer, to, source = connection.index
    perturbed.weights[layer][to, source] += delta
    return perturbed


def replay(spec: LayerSpec, params0: DenseParams, data, cfg: TrainConfig,
           mask: Optional[Mask] = None, tracked: Optional[Sequence] = None,
           probe_epochs: Union[int, Callable[[TrainResult], int], None] = None,
           base_sinks: Iterable = (), connection: ConnectionId = FIRST_CONNECTION,
           run_id="run") -> Replay:
    """
    Baseline run plus a run from params0 with `connection` shifted by
    cfg.perturbation_delta. Both share seed, batch schedule and hyperparameters.

    Without probe_epochs the baseline trains to convergence and the perturbed
    run covers the same horizon. With probe_epochs the baseline still trains to
    convergence but only the first probe_epochs are kept; the perturbed run
    only covers the probe. A callable probe_epochs is resolved from the
    baseline result.
    """
    per_epoch = iterations_per_epoch(len(data.train), cfg.batch_size)
    stop_after = None
    if isinstance(probe_epochs, int):
        stop_after = probe_epochs * per_epoch

    base = TrajectoryStore(spec, f"{run_id}-base", tracked, stop_after=stop_after)
    base_result = train(spec, params0, mask, data, cfg, recorder=[base, *base_sinks])
    log.info(f"Baseline run: {base_result.epochs_run} epochs, {base.n_iterations} iterates recorded")

    if callable(probe_epochs):
        probe_epochs = probe_epochs(base_result)
        stop_after = probe_epochs * per_epoch
        base.truncate(stop_after + 1)
    horizon = probe_epochs if probe_epochs is not None else base_result.epochs_run
    pert = TrajectoryStore(spec, f"{run_id}-pert", tracked, stop_after=stop_after)
    pert_params = perturb(params0, connection, cfg.perturbation_delta)
    pert_result = train(spec, pert_params, mask, data, cfg, recorder=pert, max_epochs=horizon)

    n = min(base.n_iterations, pert.n_iterations)
    if base.n_iterations != pert.n_iterations:
        log.info(f"Truncating replay to the common length {n} "
                 f"(base {base.n_iterations}, perturbed {pert.n_iterations})")
    base.truncate(n)
    pert.truncate(n)
    return Replay(base, pert, base_result, pert_result, probe_epochs)


def perturbed_replay(spec: LayerSpec, params0: DenseParams, data, cfg: TrainConfig,
                     mask: Optional[Mask] = None, tracked: Optional[Sequence] = None,
                     probe_epochs: Optional[int] = None):
    """Returns (base store, perturbed store)"""
    r = replay(spec, params0, data, cfg, mask=mask, tracked=tracked, probe_epochs=probe_epochs)
    return r.base, r.pert


def perturbation_sweep(spec: LayerSpec, params0: DenseParams, data, cfg: TrainConfig,
                       connections: Sequence, max_epochs: Optional[int] = None) -> List[DiffSeries]:
    """
    Perturb each connection in turn and return that connection's own
    difference series. One baseline plus one run per connection.
    """
    connections = [ConnectionId(*c) for c in connections]
    base = TrajectoryStore(spec, "sweep-base", connections)
    base_result = train(spec, params0, None, data, cfg, recorder=base, max_epochs=max_epochs)
    out = []
    for conn in connections:
        pert = TrajectoryStore(spec, f"sweep-{conn.label}", [conn])
        train(spec, perturb(params0, conn, cfg.perturbation_delta), None, data, cfg,
              recorder=pert, max_epochs=base_result.epochs_run)
        n = min(base.n_iterations, pert.n_iterations)
        out.append(DiffSeries(conn, base.series(conn)[:n] - pert.values[:n, 0]))
        log.debug(f"Sweep {conn.label}: {n} iterates")
    log.info(f"Perturbation sweep over {len(connections)} connections done")
    return out
