"""Task-adaptive sequence blocks.

Each block runs one shared recurrent encoder over the input stream and two
small autoregressive LSTMs that emit, per time slot, the activation basis
vector (task-independent) and per-task coordinate vectors. The block output
for a task is the piecewise-linear activation of the encoder feature under
that task's coordinates. Blocks stack: from the second block on, the shared
encoder consumes each task's output stream separately (same weights).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator, Sequence, Union

import numpy as np

from .apl import apl_apply
from .autodiff import (
    ShapeError,
    Tensor,
    add,
    concat,
    matmul,
    mul,
    record,
    sigmoid,
    tanh,
    transpose,
)


@dataclass
class LinearParams:
    w: Tensor  # (d_out, d_in)
    b: Tensor  # (d_out,)

    @classmethod
    def init(cls, rng: np.random.Generator, d_in: int, d_out: int) -> "LinearParams":
        scale = 1.0 / np.sqrt(d_in)
        return cls(w=Tensor(rng.uniform(-scale, scale, size=(d_out, d_in))),
                   b=Tensor(rng.uniform(-scale, scale, size=d_out)))

    def apply(self, x: Tensor) -> Tensor:
        if x.data.ndim == 1:
            return add(matmul(self.w, x), self.b)
        return add(matmul(x, transpose(self.w)), self.b)

    def named(self, prefix: str):
        yield f"{prefix}.w", self.w
        yield f"{prefix}.b", self.b


@dataclass
class LSTMCellParams:
    """Gate parameter blocks, each (d_h, d_in + d_h) with a d_h bias."""

    w_i: Tensor
    w_f: Tensor
    w_o: Tensor
    w_g: Tensor
    b_i: Tensor
    b_f: Tensor
    b_o: Tensor
    b_g: Tensor

    @classmethod
    def init(cls, rng: np.random.Generator, d_in: int, d_h: int) -> "LSTMCellParams":
        scale = 1.0 / np.sqrt(d_h)

        def w():
            return Tensor(rng.uniform(-scale, scale, size=(d_h, d_in + d_h)))

        def b():
            return Tensor(rng.uniform(-scale, scale, size=d_h))

        return cls(w_i=w(), w_f=w(), w_o=w(), w_g=w(),
                   b_i=b(), b_f=b(), b_o=b(), b_g=b())

    @property
    def hidden_size(self) -> int:
        return self.w_i.data.shape[0]

    @property
    def input_size(self) -> int:
        return self.w_i.data.shape[1] - self.hidden_size

    def named(self, prefix: str):
        for name in ("w_i", "w_f", "w_o", "w_g", "b_i", "b_f", "b_o", "b_g"):
            yield f"{prefix}.{name}", getattr(self, name)


def _affine(z: Tensor, w: Tensor, b: Tensor) -> Tensor:
    if z.data.ndim == 1:
        return add(matmul(w, z), b)
    return add(matmul(z, transpose(w)), b)


def lstm_step(params: LSTMCellParams, x: Tensor,
              state: tuple[Tensor, Tensor]) -> tuple[Tensor, Tensor]:
    """Standard gate equations; returns the new (h, c), inputs untouched."""
    h, c = state
    if x.data.shape[-1] != params.input_size:
        raise ShapeError(
            f"lstm_step: input width {x.data.shape[-1]} != {params.input_size}")
    if h.data.shape != c.data.shape or h.data.shape[-1] != params.hidden_size:
        raise ShapeError("lstm_step: state width mismatch")
    z = concat([x, h], axis=x.data.ndim - 1)
    i = sigmoid(_affine(z, params.w_i, params.b_i))
    f = sigmoid(_affine(z, params.w_f, params.b_f))
    o = sigmoid(_affine(z, params.w_o, params.b_o))
    g = tanh(_affine(z, params.w_g, params.b_g))
    c_new = add(mul(f, c), mul(i, g))
    h_new = mul(o, tanh(c_new))
    return h_new, c_new


@dataclass
class AttentionParams:
    """Single-head causal scaled dot-product projections (square d x d)."""

    w_q: Tensor
    w_k: Tensor
    w_v: Tensor

    @classmethod
    def init(cls, rng: np.random.Generator, d: int) -> "AttentionParams":
        scale = 1.0 / np.sqrt(d)

        def w():
            return Tensor(rng.uniform(-scale, scale, size=(d, d)))

        return cls(w_q=w(), w_k=w(), w_v=w())

    @property
    def width(self) -> int:
        return self.w_q.data.shape[0]

    def named(self, prefix: str):
        yield f"{prefix}.w_q", self.w_q
        yield f"{prefix}.w_k", self.w_k
        yield f"{prefix}.w_v", self.w_v


def attention_step(params: AttentionParams, x_n: Tensor,
                   history: Sequence[Tensor]) -> Tensor:
    """Attend from position n over positions 1..n (history then self)."""
    d = params.width
    entries = [*history, x_n]
    for e in entries:
        if e.data.shape[-1] != d or e.data.ndim != x_n.data.ndim:
            raise ShapeError("attention_step: entry width/rank mismatch")
    squeeze = x_n.data.ndim == 1
    xs = np.stack([e.data.reshape(1, d) if squeeze else e.data for e in entries])
    wq, wk, wv = params.w_q.data, params.w_k.data, params.w_v.data
    n = xs.shape[0]

    q = xs[-1] @ wq.T                     # (B, d)
    k = xs @ wk.T                         # (n, B, d)
    v = xs @ wv.T
    scores = np.einsum("bd,jbd->jb", q, k) / np.sqrt(d)
    p = np.exp(scores - scores.max(axis=0, keepdims=True))
    p /= p.sum(axis=0, keepdims=True)     # (n, B)
    y = np.einsum("jb,jbd->bd", p, v)
    out = Tensor._wrap(y[0] if squeeze else y)

    def bwd(g):
        gy = g.reshape(1, d) if squeeze else g
        gv = p[:, :, None] * gy[None, :, :]                    # (n, B, d)
        gp = np.einsum("bd,jbd->jb", gy, v)
        gs = p * (gp - (p * gp).sum(axis=0, keepdims=True))
        gs /= np.sqrt(d)
        gq = np.einsum("jb,jbd->bd", gs, k)
        gk = gs[:, :, None] * q[None, :, :]

        g_entries = np.einsum("jbd,de->jbe", gk, wk) + np.einsum("jbd,de->jbe", gv, wv)
        g_wq = np.einsum("bd,be->de", gq, xs[-1])
        g_wk = np.einsum("jbd,jbe->de", gk, xs)
        g_wv = np.einsum("jbd,jbe->de", gv, xs)
        gx_last = gq @ wq + g_entries[-1]

        def shape_back(arr):
            return arr[0] if squeeze else arr

        grads_hist = [shape_back(g_entries[j]) for j in range(n - 1)]
        return (shape_back(gx_last), *grads_hist, g_wq, g_wk, g_wv)

    record((x_n, *history, params.w_q, params.w_k, params.w_v), (out,), bwd)
    return out


Encoder = Union[LSTMCellParams, AttentionParams]


@dataclass
class TaskAdaptiveBlockParams:
    encoder: Encoder
    lstm_beta: LSTMCellParams
    beta_proj: LinearParams
    beta0: Tensor
    beta_h0: Tensor
    beta_c0: Tensor
    lstm_alpha: LSTMCellParams
    alpha_proj: LinearParams
    alpha_h0: Tensor
    alpha_c0: Tensor
    task_embeddings: list[Tensor]

    def __post_init__(self):
        m = self.beta0.data.shape[0]
        if self.lstm_alpha.input_size != 2 * m:
            raise ShapeError(
                f"coordinate LSTM input must be 2M={2 * m}, got {self.lstm_alpha.input_size}")
        for e in self.task_embeddings:
            if e.data.shape != (m,):
                raise ShapeError("task embedding length != basis count")

    @property
    def basis_count(self) -> int:
        return self.beta0.data.shape[0]

    @property
    def n_tasks(self) -> int:
        return len(self.task_embeddings)

    @property
    def hidden_size(self) -> int:
        if isinstance(self.encoder, LSTMCellParams):
            return self.encoder.hidden_size
        return self.encoder.width

    @property
    def input_size(self) -> int:
        if isinstance(self.encoder, LSTMCellParams):
            return self.encoder.input_size
        return self.encoder.width

    @classmethod
    def init(cls, rng: np.random.Generator, d_in: int, d_h: int, basis: int,
             aux_hidden: int, n_tasks: int,
             encoder: str = "lstm") -> "TaskAdaptiveBlockParams":
        if encoder == "lstm":
            enc: Encoder = LSTMCellParams.init(rng, d_in, d_h)
        elif encoder == "attention":
            if d_in != d_h:
                raise ShapeError(
                    "attention encoder requires input width == hidden width "
                    f"(square projections); got {d_in} != {d_h}")
            enc = AttentionParams.init(rng, d_h)
        else:
            raise ValueError(f"unknown encoder kind {encoder!r}")
        beta0 = np.zeros(1) if basis == 1 else np.linspace(-1.0, 1.0, basis)
        beta_proj = LinearParams.init(rng, aux_hidden, basis)
        # bias carries the spaced start pattern so early basis vectors keep
        # the Gram metric well-conditioned (distinct hinge positions)
        beta_proj.b.data[...] = beta0
        return cls(
            encoder=enc,
            lstm_beta=LSTMCellParams.init(rng, basis, aux_hidden),
            beta_proj=beta_proj,
            beta0=Tensor(beta0),
            beta_h0=Tensor(np.zeros(aux_hidden)),
            beta_c0=Tensor(np.zeros(aux_hidden)),
            lstm_alpha=LSTMCellParams.init(rng, 2 * basis, aux_hidden),
            alpha_proj=LinearParams.init(rng, aux_hidden, basis),
            alpha_h0=Tensor(np.zeros(aux_hidden)),
            alpha_c0=Tensor(np.zeros(aux_hidden)),
            task_embeddings=[Tensor(rng.uniform(-0.1, 0.1, size=basis))
                             for _ in range(n_tasks)],
        )

    def named(self, prefix: str):
        enc_kind = "encoder"
        yield from self.encoder.named(f"{prefix}.{enc_kind}")
        yield from self.lstm_beta.named(f"{prefix}.lstm_beta")
        yield from self.beta_proj.named(f"{prefix}.beta_proj")
        yield f"{prefix}.beta0", self.beta0
        yield f"{prefix}.beta_h0", self.beta_h0
        yield f"{prefix}.beta_c0", self.beta_c0
        yield from self.lstm_alpha.named(f"{prefix}.lstm_alpha")
        yield from self.alpha_proj.named(f"{prefix}.alpha_proj")
        yield f"{prefix}.alpha_h0", self.alpha_h0
        yield f"{prefix}.alpha_c0", self.alpha_c0
        for t, e in enumerate(self.task_embeddings):
            yield f"{prefix}.task_embed{t}", e


@dataclass
class BlockTrace:
    """Per-slot record consumed by the regularizer and the analysis CLI."""

    betas: list[Tensor]              # N x (M,)
    alphas: list[list[Tensor]]       # N x T x (M,)
    h_tilde: list[list[Tensor]]      # N x T (shared object when stream is shared)
    h_post: list[list[Tensor]]       # N x T

    @property
    def n_slots(self) -> int:
        return len(self.betas)

    @property
    def n_tasks(self) -> int:
        return len(self.alphas[0])


def activation_schedule(params: TaskAdaptiveBlockParams,
                        n_slots: int) -> tuple[list[Tensor], list[list[Tensor]]]:
    """Unroll the basis and per-task coordinate recurrences for N slots.

    The basis LSTM consumes its previous output (learned start token); the
    coordinate LSTM consumes previous-coordinate (+) current-basis with
    shared weights, per-task state, and the task embedding as coordinate 0.
    """
    betas: list[Tensor] = []
    alphas: list[list[Tensor]] = []
    beta_prev = params.beta0
    beta_state = (params.beta_h0, params.beta_c0)
    alpha_prev = list(params.task_embeddings)
    alpha_state = [(params.alpha_h0, params.alpha_c0)] * params.n_tasks
    for _ in range(n_slots):
        beta_state = lstm_step(params.lstm_beta, beta_prev, beta_state)
        beta_n = params.beta_proj.apply(beta_state[0])
        betas.append(beta_n)
        beta_prev = beta_n
        slot_alphas = []
        for t in range(params.n_tasks):
            token = concat([alpha_prev[t], beta_n])
            alpha_state[t] = lstm_step(params.lstm_alpha, token, alpha_state[t])
            alpha_t = params.alpha_proj.apply(alpha_state[t][0])
            slot_alphas.append(alpha_t)
            alpha_prev[t] = alpha_t
        alphas.append(slot_alphas)
    return betas, alphas


def _zero_state(like: Tensor, d_h: int) -> tuple[Tensor, Tensor]:
    shape = (d_h,) if like.data.ndim == 1 else (like.data.shape[0], d_h)
    return Tensor(np.zeros(shape)), Tensor(np.zeros(shape))


def _encode_stream(encoder: Encoder, x_seq: Sequence[Tensor]) -> list[Tensor]:
    if isinstance(encoder, LSTMCellParams):
        state = _zero_state(x_seq[0], encoder.hidden_size)
        outs = []
        for x_n in x_seq:
            state = lstm_step(encoder, x_n, state)
            outs.append(state[0])
        return outs
    outs = []
    for n, x_n in enumerate(x_seq):
        outs.append(attention_step(encoder, x_n, x_seq[:n]))
    return outs


def block_forward(params: TaskAdaptiveBlockParams,
                  x_seq: Sequence[Tensor]) -> BlockTrace:
    """Run a block over one shared input stream (first block of the stack)."""
    if len(x_seq) == 0:
        raise ShapeError("block_forward: empty sequence")
    features = _encode_stream(params.encoder, x_seq)
    return _apply_activations(params, [features] * params.n_tasks)


def block_forward_per_task(params: TaskAdaptiveBlockParams,
                           streams: Sequence[Sequence[Tensor]]) -> BlockTrace:
    """Run a block where each task feeds its own stream through the shared encoder."""
    if len(streams) != params.n_tasks:
        raise ShapeError("block_forward_per_task: one stream per task required")
    if len(streams[0]) == 0:
        raise ShapeError("block_forward_per_task: empty sequence")
    features = [_encode_stream(params.encoder, stream) for stream in streams]
    return _apply_activations(params, features)


def _apply_activations(params: TaskAdaptiveBlockParams,
                       features: Sequence[Sequence[Tensor]]) -> BlockTrace:
    n_slots = len(features[0])
    betas, alphas = activation_schedule(params, n_slots)
    h_tilde = [[features[t][n] for t in range(params.n_tasks)]
               for n in range(n_slots)]
    h_post = [[apl_apply(h_tilde[n][t], alphas[n][t], betas[n])
               for t in range(params.n_tasks)]
              for n in range(n_slots)]
    return BlockTrace(betas=betas, alphas=alphas, h_tilde=h_tilde, h_post=h_post)


@dataclass
class HTANParams:
    """Full stack: L task-adaptive blocks plus per-task linear heads."""

    blocks: list[TaskAdaptiveBlockParams]
    heads: list[LinearParams]

    def __post_init__(self):
        for prev, nxt in zip(self.blocks[:-1], self.blocks[1:]):
            if nxt.input_size != prev.hidden_size:
                raise ShapeError(
                    f"block chain mismatch: {prev.hidden_size} -> {nxt.input_size}")
        for head in self.heads:
            if head.w.data.shape[1] != self.blocks[-1].hidden_size:
                raise ShapeError("head input width != final hidden width")
        tasks = {len(b.task_embeddings) for b in self.blocks}
        if len(tasks) != 1 or len(self.heads) not in tasks:
            raise ShapeError("inconsistent task count across blocks/heads")

    @property
    def n_tasks(self) -> int:
        return len(self.heads)

    @classmethod
    def init(cls, rng: np.random.Generator, *, d_in: int, d_h: int, n_blocks: int,
             basis: int, aux_hidden: int, n_tasks: int, n_classes: int,
             encoder: str = "lstm") -> "HTANParams":
        blocks = []
        for l in range(n_blocks):
            blocks.append(TaskAdaptiveBlockParams.init(
                rng, d_in if l == 0 else d_h, d_h, basis, aux_hidden, n_tasks,
                encoder=encoder))
        heads = [LinearParams.init(rng, d_h, n_classes) for _ in range(n_tasks)]
        return cls(blocks=blocks, heads=heads)

    def named(self) -> Iterator[tuple[str, Tensor]]:
        for l, block in enumerate(self.blocks):
            yield from block.named(f"block{l}")
        for t, head in enumerate(self.heads):
            yield from head.named(f"head{t}")


def htan_forward(model: HTANParams,
                 x_seq: Sequence[Tensor]) -> tuple[list[list[Tensor]], list[BlockTrace]]:
    """Forward the stack; returns per-task per-slot logits and all block traces."""
    traces = [block_forward(model.blocks[0], x_seq)]
    for block in model.blocks[1:]:
        prev = traces[-1]
        streams = [[prev.h_post[n][t] for n in range(prev.n_slots)]
                   for t in range(prev.n_tasks)]
        traces.append(block_forward_per_task(block, streams))
    last = traces[-1]
    logits = [[model.heads[t].apply(last.h_post[n][t])
               for n in range(last.n_slots)]
              for t in range(model.n_tasks)]
    return logits, traces


# ---------------------------------------------------------------------------
# Parameter counting


def count_parameters(named) -> int:
    return sum(t.data.size for _, t in named)


def lstm_cell_param_count(d_in: int, d_h: int) -> int:
    return 4 * (d_h * (d_in + d_h) + d_h)


def soft_sharing_baseline_count(*, d_in: int, d_h: int, n_blocks: int,
                                n_tasks: int, n_classes: int) -> int:
    """(T+1)-module baseline: T task stacks + 1 shared stack of equal size,
    with per-task heads reading the concatenated task+shared features."""
    stack = lstm_cell_param_count(d_in, d_h)
    stack += (n_blocks - 1) * lstm_cell_param_count(d_h, d_h)
    heads = n_tasks * (2 * d_h * n_classes + n_classes)
    return (n_tasks + 1) * stack + heads


@dataclass
class ParamCountReport:
    htan_total: int
    baseline_total: int
    n_tasks: int
    crossover: int | None
    by_tasks: list[tuple[int, int, int]] = field(default_factory=list)

    def lines(self) -> list[str]:
        out = [
            f"htan_total={self.htan_total}",
            f"soft_sharing_baseline={self.baseline_total} (T={self.n_tasks})",
            f"crossover_T={self.crossover}",
        ]
        out += [f"T={t}: htan={h} baseline={b}" for t, h, b in self.by_tasks]
        return out


def parameter_count(*, d_in: int, d_h: int, n_blocks: int, basis: int,
                    aux_hidden: int, n_tasks: int, n_classes: int,
                    spd_layers: int, encoder: str = "lstm",
                    max_tasks: int = 16) -> ParamCountReport:
    """Exact learnable-scalar count (model + metric networks) vs the baseline.

    Counts come from actually constructed parameter sets, so they cannot
    drift from the implementation. `crossover` is the smallest task count at
    which the full model is smaller than the soft-sharing baseline.
    """
    from .spd import SPDNetParams

    rng = np.random.default_rng(0)

    def totals(t: int) -> tuple[int, int]:
        model = HTANParams.init(rng, d_in=d_in, d_h=d_h, n_blocks=n_blocks,
                                basis=basis, aux_hidden=aux_hidden, n_tasks=t,
                                n_classes=n_classes, encoder=encoder)
        spd = [SPDNetParams.init(rng, basis, spd_layers) for _ in range(n_blocks)]
        htan = count_parameters(model.named())
        htan += sum(count_parameters(s.named(f"spd{l}")) for l, s in enumerate(spd))
        base = soft_sharing_baseline_count(d_in=d_in, d_h=d_h, n_blocks=n_blocks,
                                           n_tasks=t, n_classes=n_classes)
        return htan, base

    by_tasks = []
    crossover = None
    for t in range(1, max_tasks + 1):
        h, b = totals(t)
        by_tasks.append((t, h, b))
        if crossover is None and h < b:
            crossover = t
    htan_total, baseline_total = totals(n_tasks)
    return ParamCountReport(htan_total=htan_total, baseline_total=baseline_total,
                            n_tasks=n_tasks, crossover=crossover, by_tasks=by_tasks)
