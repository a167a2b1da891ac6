"""Regime-switching synthetic multi-task sequences.

A hidden Markov regime controls how strongly task labels couple at each
slot: task 1's label is a fixed balanced linear function of the input,
every other task copies it with the regime's coupling probability and
draws uniformly otherwise. All sequences start in regime 0, so the
expected coupling is a slot-dependent curve the model can be scored
against.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, replace

import numpy as np

from .checkpoint import CheckpointError, read_tensors, write_tensors

DATA_MAGIC = b"HTANDATA"
DATA_VERSION = 1


def format_floats(values) -> str:
    return ", ".join(repr(float(v)) for v in values)


def parse_floats(text: str) -> list[float]:
    return [float(tok) for tok in text.split(",") if tok.strip()]


def format_matrix(m) -> str:
    return "; ".join(" ".join(repr(float(v)) for v in row) for row in np.asarray(m))


def parse_matrix(text: str) -> np.ndarray:
    rows = [[float(tok) for tok in row.split()] for row in text.split(";") if row.strip()]
    return np.asarray(rows, dtype=np.float64)


def transition_from_dwell(dwells) -> np.ndarray:
    """Row-stochastic matrix with expected dwell time `dwells[r]` in regime r."""
    dwells = np.asarray(dwells, dtype=np.float64)
    r = dwells.size
    if np.any(dwells < 1.0):
        raise ValueError("dwell times must be >= 1 slot")
    if r == 1:
        return np.ones((1, 1))
    out = np.empty((r, r))
    for i, d in enumerate(dwells):
        leave = 1.0 / d
        out[i, :] = leave / (r - 1)
        out[i, i] = 1.0 - leave
    return out


@dataclass
class RegimeSwitchingSpec:
    tasks: int
    input_dim: int
    seq_len: int
    classes: int
    transition: np.ndarray        # (R, R), rows sum to 1
    rhos: np.ndarray              # (R,) label coupling per regime
    gaussian_scale: float = 2.0
    seed: int = 0

    def __post_init__(self):
        self.transition = np.asarray(self.transition, dtype=np.float64)
        self.rhos = np.asarray(self.rhos, dtype=np.float64)
        if min(self.tasks, self.input_dim, self.seq_len, self.classes) < 1:
            raise ValueError("all counts must be >= 1")
        if self.classes > self.input_dim:
            raise ValueError("class means need classes <= input_dim")
        r = self.rhos.size
        if self.transition.shape != (r, r):
            raise ValueError(
                f"transition shape {self.transition.shape} vs {r} regimes")
        if np.abs(self.transition.sum(axis=1) - 1.0).max() > 1e-12:
            raise ValueError("transition rows must sum to 1 (within 1e-12)")
        if np.any(self.transition < 0.0):
            raise ValueError("transition probabilities must be nonnegative")
        if np.any(self.rhos < 0.0) or np.any(self.rhos > 1.0):
            raise ValueError("coupling rho must lie in [0, 1]")

    def to_text(self) -> str:
        return "\n".join([
            f"tasks = {self.tasks}",
            f"input_dim = {self.input_dim}",
            f"seq_len = {self.seq_len}",
            f"classes = {self.classes}",
            f"transition_matrix = {format_matrix(self.transition)}",
            f"regime_rhos = {format_floats(self.rhos)}",
            f"gaussian_scale = {self.gaussian_scale!r}",
            f"seed = {self.seed}",
        ]) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "RegimeSwitchingSpec":
        fields: dict[str, str] = {}
        for line in text.splitlines():
            line = line.strip()
            if not line:
                continue
            key, _, value = line.partition("=")
            fields[key.strip()] = value.strip()
        return cls(
            tasks=int(fields["tasks"]),
            input_dim=int(fields["input_dim"]),
            seq_len=int(fields["seq_len"]),
            classes=int(fields["classes"]),
            transition=parse_matrix(fields["transition_matrix"]),
            rhos=np.asarray(parse_floats(fields["regime_rhos"])),
            gaussian_scale=float(fields["gaussian_scale"]),
            seed=int(fields["seed"]),
        )


def default_data_spec(tasks: int = 2, seed: int = 0) -> RegimeSwitchingSpec:
    """Two regimes with couplings {0.95, 0.05}, expected dwell 10 slots.

    Sequences start in the weak-coupling regime, so the expected coupling
    rises over slots toward the 0.5 stationary mean: an early/late contrast
    the per-slot analysis can be scored against.
    """
    return RegimeSwitchingSpec(
        tasks=tasks, input_dim=8, seq_len=40, classes=3,
        transition=transition_from_dwell([10.0, 10.0]),
        rhos=np.array([0.05, 0.95]), gaussian_scale=2.0, seed=seed)


@dataclass
class SequenceBatch:
    inputs: np.ndarray            # (B, N, d_in)
    labels: np.ndarray            # (T, B, N) int64
    regimes: np.ndarray           # (B, N) int64, withheld from the model
    spec: RegimeSwitchingSpec

    @property
    def n_sequences(self) -> int:
        return self.inputs.shape[0]

    @property
    def seq_len(self) -> int:
        return self.inputs.shape[1]


def _class_means(rng: np.random.Generator, classes: int, dim: int,
                 scale: float) -> np.ndarray:
    """Centered simplex vertices in a random orientation; equal norms keep
    the argmax labeling rule balanced across classes."""
    e = np.zeros((classes, dim))
    e[np.arange(classes), np.arange(classes)] = 1.0
    e[:, :classes] -= 1.0 / classes
    q, r = np.linalg.qr(rng.normal(size=(dim, dim)))
    q = q * np.sign(np.diag(r))
    return scale * (e @ q.T)


def generate_dataset(spec: RegimeSwitchingSpec, n_sequences: int) -> SequenceBatch:
    """Deterministic per (spec, n_sequences); all sequences start in regime 0."""
    if n_sequences < 1:
        raise ValueError("n_sequences must be >= 1")
    rng = np.random.default_rng(spec.seed)
    b, n, d, c = n_sequences, spec.seq_len, spec.input_dim, spec.classes
    means = _class_means(rng, c, d, spec.gaussian_scale)

    regimes = np.zeros((b, n), dtype=np.int64)
    cdf = np.cumsum(spec.transition, axis=1)
    for slot in range(1, n):
        u = rng.uniform(size=b)
        regimes[:, slot] = (u[:, None] > cdf[regimes[:, slot - 1]]).sum(axis=1)

    z = rng.integers(0, c, size=(b, n))
    inputs = means[z] + rng.normal(size=(b, n, d))

    labels = np.empty((spec.tasks, b, n), dtype=np.int64)
    labels[0] = np.argmax(inputs @ means.T, axis=2)
    rho_at = spec.rhos[regimes]
    for t in range(1, spec.tasks):
        coupled = rng.uniform(size=(b, n)) < rho_at
        alt = rng.integers(0, c, size=(b, n))
        labels[t] = np.where(coupled, labels[0], alt)
    return SequenceBatch(inputs=inputs, labels=labels, regimes=regimes, spec=spec)


def generate_splits(spec: RegimeSwitchingSpec, n_train: int,
                    n_test: int) -> tuple[SequenceBatch, SequenceBatch]:
    """Train/test splits sharing one generative draw (same class means and
    labeling rule); sequences are iid so a contiguous slice is a fair split."""
    pool = generate_dataset(spec, n_train + n_test)
    train = SequenceBatch(inputs=pool.inputs[:n_train].copy(),
                          labels=pool.labels[:, :n_train].copy(),
                          regimes=pool.regimes[:n_train].copy(), spec=spec)
    test = SequenceBatch(inputs=pool.inputs[n_train:].copy(),
                         labels=pool.labels[:, n_train:].copy(),
                         regimes=pool.regimes[n_train:].copy(), spec=spec)
    return train, test


def empirical_covariance(labels_task1: np.ndarray, labels_task2: np.ndarray,
                         slot: int, event: tuple[int, int]) -> float:
    """COV of the indicator pair (labels1==a, labels2==b) at one slot."""
    if labels_task1.shape != labels_task2.shape or labels_task1.ndim != 2:
        raise ValueError("label arrays must both be (B, N)")
    if labels_task1.shape[0] == 0:
        raise ValueError("empty slot: no sequences to average over")
    a, b = event
    y1 = (labels_task1[:, slot] == a).astype(np.float64)
    y2 = (labels_task2[:, slot] == b).astype(np.float64)
    return float((y1 * y2).mean() - y1.mean() * y2.mean())


def covariance_by_slot(labels_task1: np.ndarray, labels_task2: np.ndarray,
                       classes: int) -> np.ndarray:
    """(N, C, C) covariance of indicator pairs per slot."""
    n = labels_task1.shape[1]
    out = np.empty((n, classes, classes))
    for slot in range(n):
        for a in range(classes):
            for b in range(classes):
                out[slot, a, b] = empirical_covariance(
                    labels_task1, labels_task2, slot, (a, b))
    return out


def mean_abs_covariance(labels_task1: np.ndarray, labels_task2: np.ndarray,
                        classes: int) -> np.ndarray:
    """Per-slot mean |COV| over all C x C indicator pairs."""
    return np.abs(covariance_by_slot(labels_task1, labels_task2, classes)).mean(
        axis=(1, 2))


def ground_truth_relation(batch: SequenceBatch) -> np.ndarray:
    """Per-slot mean coupling rho(r_n) over the batch."""
    return batch.spec.rhos[batch.regimes].mean(axis=0)


def save_dataset(path, batch: SequenceBatch) -> None:
    text = batch.spec.to_text().encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(DATA_MAGIC)
        fh.write(struct.pack("<I", DATA_VERSION))
        fh.write(struct.pack("<I", len(text)))
        fh.write(text)
        write_tensors(fh, {
            "inputs": batch.inputs,
            "labels": batch.labels.astype(np.float64),
            "regimes": batch.regimes.astype(np.float64),
        })


def load_dataset(path) -> SequenceBatch:
    with open(path, "rb") as fh:
        if fh.read(len(DATA_MAGIC)) != DATA_MAGIC:
            raise CheckpointError("bad magic string; not a dataset file")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != DATA_VERSION:
            raise CheckpointError(f"unsupported dataset version {version}")
        (text_len,) = struct.unpack("<I", fh.read(4))
        spec = RegimeSwitchingSpec.from_text(fh.read(text_len).decode("utf-8"))
        arrays = read_tensors(fh)
    return SequenceBatch(
        inputs=arrays["inputs"],
        labels=arrays["labels"].astype(np.int64),
        regimes=arrays["regimes"].astype(np.int64),
        spec=spec,
    )


def with_seed(spec: RegimeSwitchingSpec, seed: int) -> RegimeSwitchingSpec:
    return replace(spec, seed=seed)
