"""Adversarial training of the sequence model against its metric networks.

Per batch the model parameters descend the task losses plus the entrywise-L1
functional-distance regularizer; every `theta_period` batches the metric
networks ascend a hardest-pair contrast that magnifies the largest
activation-function distances. The two parameter sets are disjoint and each
step is checksum-verified not to touch the other side.
"""

from __future__ import annotations

import hashlib
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .apl import distance_matrix, gaussian_gram, mahalanobis_sq
from .autodiff import (
    Tape,
    Tensor,
    absval,
    add,
    backward,
    constant,
    exp,
    log,
    mean_all,
    no_tape,
    scale,
    softmax_cross_entropy,
    stack,
    sub,
    sum_all,
)
from .data import SequenceBatch
from .layers import BlockTrace, HTANParams, htan_forward
from .spd import (
    NumericalError,
    SPDNetParams,
    spd_defects,
    spdnet_rollout,
    stiefel_defect,
    stiefel_step,
)


@dataclass
class TrainConfig:
    tasks: int = 2
    blocks: int = 2
    basis: int = 8
    seq_len: int = 40
    hidden: int = 64
    aux_hidden: int = 16
    spd_layers: int = 1
    reg_lambda: float = 0.01
    lr_phi: float = 1e-3
    lr_theta: float = 1e-3
    theta_period: int = 1        # 0 disables metric updates entirely
    epochs: int = 5
    batch_size: int = 32
    seed: int = 0
    spd_init: str = "gram"       # gram | identity
    encoder: str = "lstm"        # lstm | attention
    detach_metric: bool = False
    record_wall_time: bool = False

    def __post_init__(self):
        if self.reg_lambda < 0.0:
            raise ValueError("reg_lambda must be >= 0")
        for name in ("tasks", "blocks", "basis", "seq_len", "hidden",
                     "aux_hidden", "epochs", "batch_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.spd_layers < 0 or self.theta_period < 0:
            raise ValueError("spd_layers and theta_period must be >= 0")
        if not (self.lr_phi > 0.0 and self.lr_theta > 0.0):
            raise ValueError("learning rates must be positive")
        if self.spd_init not in ("gram", "identity"):
            raise ValueError(f"spd_init must be gram|identity, got {self.spd_init!r}")
        if self.encoder not in ("lstm", "attention"):
            raise ValueError(f"encoder must be lstm|attention, got {self.encoder!r}")


def build_model(cfg: TrainConfig, input_dim: int,
                n_classes: int) -> tuple[HTANParams, list[SPDNetParams]]:
    rng = np.random.default_rng(cfg.seed)
    model = HTANParams.init(
        rng, d_in=input_dim, d_h=cfg.hidden, n_blocks=cfg.blocks,
        basis=cfg.basis, aux_hidden=cfg.aux_hidden, n_tasks=cfg.tasks,
        n_classes=n_classes, encoder=cfg.encoder)
    spdnets = [SPDNetParams.init(rng, cfg.basis, cfg.spd_layers)
               for _ in range(cfg.blocks)]
    return model, spdnets


def phi_named(model: HTANParams) -> list[tuple[str, Tensor]]:
    return list(model.named())


def theta_named(spdnets: list[SPDNetParams]) -> list[tuple[str, Tensor]]:
    out = []
    for l, net in enumerate(spdnets):
        out.extend(net.named(f"spd{l}"))
    return out


def assert_disjoint(phi: list[tuple[str, Tensor]],
                    theta: list[tuple[str, Tensor]]) -> None:
    phi_ids = {id(t) for _, t in phi}
    if phi_ids & {id(t) for _, t in theta}:
        raise ValueError("phi and theta parameter sets share a tensor")


def params_digest(named: list[tuple[str, Tensor]]) -> bytes:
    h = hashlib.blake2b(digest_size=16)
    for name, t in named:
        h.update(name.encode())
        h.update(t.data.tobytes())
    return h.digest()


def epoch_permutation(seed: int, epoch: int, count: int) -> np.ndarray:
    """Documented batch-order rule: shared by the loop and its test oracles."""
    return np.random.default_rng([seed, epoch]).permutation(count)


# ---------------------------------------------------------------------------
# Losses


@dataclass
class PhiLoss:
    total: Tensor
    task_losses: list[Tensor]
    reg: Tensor | None


def metric_schedule(spdnets: list[SPDNetParams], traces: list[BlockTrace],
                    spd_init: str, detach_metric: bool = False) -> list[list[Tensor]]:
    """Per-block, per-slot metric matrices M_{l,n} from the basis trace.

    With `detach_metric` the rollout happens off-tape and enters the graph
    as constants (regularizer gradient then skips the basis recurrence).
    """
    if len(spdnets) != len(traces):
        raise ValueError("one metric network per block is required")

    def one_block(net, trace):
        betas = trace.betas
        if detach_metric:
            betas = [constant(b.data.copy()) for b in betas]
        if spd_init == "gram":
            m0 = gaussian_gram(betas[0])
        else:
            m0 = constant(np.eye(betas[0].data.shape[0]))
        return spdnet_rollout(m0, betas, net)

    if not detach_metric:
        return [one_block(net, tr) for net, tr in zip(spdnets, traces)]
    with no_tape():
        rolled = [one_block(net, tr) for net, tr in zip(spdnets, traces)]
    return [[constant(m.data.copy()) for m in block] for block in rolled]


def loss_phi(logits: list[list[Tensor]], targets: np.ndarray,
             traces: list[BlockTrace], metrics: list[list[Tensor]] | None,
             reg_lambda: float) -> PhiLoss:
    """Sum of per-task mean cross-entropies plus the L1 distance regularizer.

    `reg_lambda == 0` (or a single task) skips the regularizer graph
    entirely so the ablation trajectory is bitwise identical to a plain
    multi-task run.
    """
    n_tasks = len(logits)
    n_slots = len(logits[0])
    if targets.shape[0] != n_tasks or targets.shape[2] != n_slots:
        raise ValueError(f"targets shape {targets.shape} misaligned with logits")
    task_losses = []
    for t in range(n_tasks):
        per_slot = [mean_all(softmax_cross_entropy(logits[t][n], targets[t][:, n]))
                    for n in range(n_slots)]
        task_losses.append(mean_all(stack(per_slot)))
    total = task_losses[0]
    for term in task_losses[1:]:
        total = add(total, term)

    reg = None
    if reg_lambda > 0.0 and n_tasks >= 2:
        if metrics is None or len(metrics) != len(traces):
            raise ValueError("metrics misaligned with traces")
        parts = []
        for trace, block_metrics in zip(traces, metrics):
            if len(block_metrics) != trace.n_slots:
                raise ValueError("metrics misaligned with trace slots")
            for n in range(trace.n_slots):
                d = distance_matrix(trace.alphas[n], block_metrics[n])
                parts.append(sum_all(absval(d)))
        reg = sum_all(stack(parts))
        total = add(total, scale(reg, reg_lambda))
    return PhiLoss(total=total, task_losses=task_losses, reg=reg)


def loss_theta(traces: list[BlockTrace], metrics: list[list[Tensor]]) -> Tensor:
    """Hardest-pair contrast, summed over blocks, slots, and anchor tasks.

    For anchor i, k is the farthest other task (ties to the smallest index);
    the term is d2(i,k) minus log-sum-exp of d2(i,j) over j != k (j = i
    contributes exp(0)). Ascending this magnifies the largest distances.
    """
    n_tasks = traces[0].n_tasks
    if n_tasks < 2:
        raise ValueError("loss_theta is undefined for a single task")
    if len(metrics) != len(traces):
        raise ValueError("metrics misaligned with traces")
    terms = []
    for trace, block_metrics in zip(traces, metrics):
        for n in range(trace.n_slots):
            alphas = trace.alphas[n]
            metric = block_metrics[n]
            pair: dict[tuple[int, int], Tensor] = {}
            for i in range(n_tasks):
                for j in range(i + 1, n_tasks):
                    pair[(i, j)] = mahalanobis_sq(alphas[i], alphas[j], metric)

            def d2(i, j):
                if i == j:
                    return None
                return pair[(min(i, j), max(i, j))]

            for i in range(n_tasks):
                dist_to = [-math.inf if j == i else float(d2(i, j).data)
                           for j in range(n_tasks)]
                k = int(np.argmax(dist_to))  # np.argmax ties -> smallest index
                others = [j for j in range(n_tasks) if j != k]
                shift = max(0.0 if j == i else float(d2(i, j).data)
                            for j in others)
                exps = [constant(math.exp(-shift)) if j == i
                        else exp(sub(d2(i, j), constant(shift)))
                        for j in others]
                lse = add(log(sum_all(stack(exps))), constant(shift))
                terms.append(sub(d2(i, k), lse))
    total = terms[0]
    if len(terms) > 1:
        total = sum_all(stack(terms))
    return total


# ---------------------------------------------------------------------------
# Optimizers


@dataclass
class Adam:
    """Adaptive-moment update. beta1 defaults to 0 (second-moment scaling
    only): the step is then a strict descent direction on its batch, which
    keeps the per-step directional-derivative monitor sign-exact."""

    lr: float
    beta1: float = 0.0
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    slots: dict = field(default_factory=dict)

    def step(self, named: list[tuple[str, Tensor]]) -> float:
        """Apply one update from stored .grad; returns sum <grad, delta>."""
        self.step_count += 1
        t = self.step_count
        dd = 0.0
        for name, param in named:
            g = param.grad
            if g is None:
                continue
            m, v = self.slots.get(name, (np.zeros_like(param.data),
                                         np.zeros_like(param.data)))
            m = self.beta1 * m + (1.0 - self.beta1) * g
            v = self.beta2 * v + (1.0 - self.beta2) * g * g
            self.slots[name] = (m, v)
            m_hat = m / (1.0 - self.beta1 ** t)
            v_hat = v / (1.0 - self.beta2 ** t)
            delta = -self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
            param.data += delta
            dd += float(np.sum(g * delta))
        return dd


def ascend_theta(spdnets: list[SPDNetParams], lr: float) -> float:
    """Plain gradient ascent on Euclidean params, retraction on Stiefel ones."""
    dd = 0.0
    stiefel = {id(t) for net in spdnets for t in net.stiefel_tensors()}
    for l, net in enumerate(spdnets):
        for name, param in net.named(f"spd{l}"):
            g = param.grad
            if g is None:
                continue
            if id(param) in stiefel:
                new = stiefel_step(param.data, g, lr, direction="ascent")
                dd += float(np.sum(g * (new - param.data)))
                param.data[...] = new
            else:
                param.data += lr * g
                dd += lr * float(np.sum(g * g))
    return dd


# ---------------------------------------------------------------------------
# Monitors and records


@dataclass
class InvariantMonitor:
    metric_sym_max: float = 0.0
    metric_min_eig: float = math.inf
    metric_violations: int = 0
    stiefel_defect_max: float = 0.0
    stiefel_violations: int = 0
    phi_steps: int = 0
    phi_dd_nonpositive: int = 0
    theta_steps: int = 0
    theta_dd_nonnegative: int = 0
    checksum_failures: int = 0

    def observe_metrics(self, metrics: list[list[Tensor]]):
        for block in metrics:
            for m in block:
                sym, min_eig = spd_defects(m.data)
                self.metric_sym_max = max(self.metric_sym_max, sym)
                self.metric_min_eig = min(self.metric_min_eig, min_eig)
                if sym > 1e-10 or min_eig < 1e-10:
                    self.metric_violations += 1

    def observe_stiefel(self, spdnets: list[SPDNetParams]):
        for net in spdnets:
            for w in net.stiefel_tensors():
                defect = stiefel_defect(w.data)
                self.stiefel_defect_max = max(self.stiefel_defect_max, defect)
                if defect >= 1e-6:
                    self.stiefel_violations += 1

    def summary(self) -> dict:
        return {
            "metric_sym_max": self.metric_sym_max,
            "metric_min_eig": (None if math.isinf(self.metric_min_eig)
                               else self.metric_min_eig),
            "metric_violations": self.metric_violations,
            "stiefel_defect_max": self.stiefel_defect_max,
            "stiefel_violations": self.stiefel_violations,
            "phi_steps": self.phi_steps,
            "phi_dd_nonpositive": self.phi_dd_nonpositive,
            "theta_steps": self.theta_steps,
            "theta_dd_nonnegative": self.theta_dd_nonnegative,
            "checksum_failures": self.checksum_failures,
        }


@dataclass
class MetricsRecord:
    epoch: int
    task_losses: list[float]
    task_accs: list[float]
    reg_value: float
    ltheta_value: float
    wall_ms: float


@dataclass
class TrainState:
    adam: Adam
    monitor: InvariantMonitor = field(default_factory=InvariantMonitor)
    batches_seen: int = 0


def _slot_tensors(inputs: np.ndarray) -> list[Tensor]:
    return [Tensor(np.ascontiguousarray(inputs[:, n, :]))
            for n in range(inputs.shape[1])]


def _detached_traces(traces: list[BlockTrace]) -> list[BlockTrace]:
    out = []
    for tr in traces:
        out.append(BlockTrace(
            betas=[constant(b.data.copy()) for b in tr.betas],
            alphas=[[constant(a.data.copy()) for a in row] for row in tr.alphas],
            h_tilde=tr.h_tilde,
            h_post=tr.h_post,
        ))
    return out


def train_epoch(model: HTANParams, spdnets: list[SPDNetParams],
                batch: SequenceBatch, cfg: TrainConfig, state: TrainState,
                epoch: int) -> MetricsRecord:
    """One pass over the data; returns the per-epoch training metrics row."""
    started = time.perf_counter()
    phi = phi_named(model)
    theta = theta_named(spdnets)
    assert_disjoint(phi, theta)
    use_reg = cfg.reg_lambda > 0.0 and cfg.tasks >= 2
    use_theta = cfg.theta_period > 0 and cfg.tasks >= 2 and len(theta) > 0

    order = epoch_permutation(cfg.seed, epoch, batch.n_sequences)
    loss_sums = np.zeros(cfg.tasks)
    correct = np.zeros(cfg.tasks)
    total_slots = 0
    reg_sum, reg_batches = 0.0, 0
    ltheta_sum, ltheta_batches = 0.0, 0

    for start in range(0, batch.n_sequences, cfg.batch_size):
        idx = order[start:start + cfg.batch_size]
        inputs = batch.inputs[idx]
        targets = batch.labels[:, idx, :]
        state.batches_seen += 1

        for _, p in phi:
            p.zero_grad()
        for _, p in theta:
            p.zero_grad()

        with Tape() as tape:
            logits, traces = htan_forward(model, _slot_tensors(inputs))
            metrics = None
            if use_reg:
                metrics = metric_schedule(spdnets, traces, cfg.spd_init,
                                          cfg.detach_metric)
            phi_loss = loss_phi(logits, targets, traces, metrics, cfg.reg_lambda)

        total_value = float(phi_loss.total.data)
        if not math.isfinite(total_value):
            raise NumericalError(
                f"non-finite training loss at epoch {epoch} batch "
                f"{state.batches_seen}: {total_value}")

        theta_before = params_digest(theta)
        backward(tape, phi_loss.total)
        dd_phi = state.adam.step(phi)
        state.monitor.phi_steps += 1
        if dd_phi <= 0.0:
            state.monitor.phi_dd_nonpositive += 1
        if params_digest(theta) != theta_before:
            state.monitor.checksum_failures += 1
            raise NumericalError("model step modified metric-network parameters")

        if metrics is not None:
            state.monitor.observe_metrics(metrics)

        for t in range(cfg.tasks):
            loss_sums[t] += float(phi_loss.task_losses[t].data) * idx.size
            for n in range(batch.seq_len):
                pred = np.argmax(logits[t][n].data, axis=1)
                correct[t] += int((pred == targets[t][:, n]).sum())
        total_slots += idx.size * batch.seq_len
        if phi_loss.reg is not None:
            reg_sum += float(phi_loss.reg.data)
            reg_batches += 1

        if use_theta and state.batches_seen % cfg.theta_period == 0:
            for _, p in theta:
                p.zero_grad()
            det = _detached_traces(traces)
            phi_before = params_digest(phi)
            with Tape() as tape2:
                metrics2 = metric_schedule(spdnets, det, cfg.spd_init)
                ltheta = loss_theta(det, metrics2)
            lt_value = float(ltheta.data)
            if not math.isfinite(lt_value):
                raise NumericalError(
                    f"non-finite metric loss at epoch {epoch} batch "
                    f"{state.batches_seen}: {lt_value}")
            backward(tape2, ltheta)
            dd_theta = ascend_theta(spdnets, cfg.lr_theta)
            state.monitor.theta_steps += 1
            if dd_theta >= 0.0:
                state.monitor.theta_dd_nonnegative += 1
            if params_digest(phi) != phi_before:
                state.monitor.checksum_failures += 1
                raise NumericalError("metric step modified model parameters")
            state.monitor.observe_metrics(metrics2)
            state.monitor.observe_stiefel(spdnets)
            ltheta_sum += lt_value
            ltheta_batches += 1

    wall_ms = (time.perf_counter() - started) * 1000.0
    return MetricsRecord(
        epoch=epoch,
        task_losses=list(loss_sums / batch.n_sequences),
        task_accs=list(correct / max(total_slots, 1)),
        reg_value=reg_sum / reg_batches if reg_batches else 0.0,
        ltheta_value=ltheta_sum / ltheta_batches if ltheta_batches else 0.0,
        wall_ms=wall_ms if cfg.record_wall_time else 0.0,
    )


def train_run(model: HTANParams, spdnets: list[SPDNetParams],
              train_batch: SequenceBatch,
              cfg: TrainConfig) -> tuple[list[MetricsRecord], TrainState]:
    state = TrainState(adam=Adam(lr=cfg.lr_phi))
    records = [train_epoch(model, spdnets, train_batch, cfg, state, epoch)
               for epoch in range(1, cfg.epochs + 1)]
    return records, state


# ---------------------------------------------------------------------------
# Checkpoint marriage


def state_tensors(model: HTANParams,
                  spdnets: list[SPDNetParams]) -> dict[str, np.ndarray]:
    return {name: t.data for name, t in [*phi_named(model), *theta_named(spdnets)]}


def load_state(model: HTANParams, spdnets: list[SPDNetParams],
               tensors: dict[str, np.ndarray]) -> None:
    """Install checkpoint tensors into a freshly built model, strictly."""
    from .checkpoint import CheckpointError

    expected = [*phi_named(model), *theta_named(spdnets)]
    names = {name for name, _ in expected}
    missing = names - set(tensors)
    extra = set(tensors) - names
    if missing:
        raise CheckpointError(f"checkpoint missing tensor {sorted(missing)[0]!r}")
    if extra:
        raise CheckpointError(f"checkpoint has unexpected tensor {sorted(extra)[0]!r}")
    for name, param in expected:
        arr = tensors[name]
        if arr.shape != param.data.shape:
            raise CheckpointError(
                f"tensor {name!r} shape {arr.shape} does not match "
                f"configured {param.data.shape}")
        param.data[...] = arr


# ---------------------------------------------------------------------------
# Evaluation


@dataclass
class EvalResult:
    task_losses: list[float]
    task_accs: list[float]

    def as_dict(self) -> dict:
        return {
            f"task{t}": {"loss": self.task_losses[t], "acc": self.task_accs[t]}
            for t in range(len(self.task_losses))
        }


def evaluate(model: HTANParams, batch: SequenceBatch) -> EvalResult:
    """Forward-only metrics; no tape, no parameter mutation, deterministic."""
    logits, _ = htan_forward(model, _slot_tensors(batch.inputs))
    n_tasks = len(logits)
    losses, accs = [], []
    for t in range(n_tasks):
        ce_sum, hit = 0.0, 0
        for n in range(batch.seq_len):
            ce = softmax_cross_entropy(logits[t][n], batch.labels[t][:, n])
            ce_sum += float(ce.data.sum())
            hit += int((np.argmax(logits[t][n].data, axis=1)
                        == batch.labels[t][:, n]).sum())
        total = batch.n_sequences * batch.seq_len
        losses.append(ce_sum / total)
        accs.append(hit / total)
    return EvalResult(task_losses=losses, task_accs=accs)
