"""End-to-end toy training: the transport mechanism must be learnable.

A single-block classifier (embedding -> attention head with [CLS] ->
readout -> cross-entropy) is trained on synthetic sequence tasks small
enough for desk-scale verification.  All gradients flow through the
unrolled Sinkhorn graph from :mod:`lotattn.autograd`; the optimizer is
plain Adam.  Training is deterministic given the seed, and the per-epoch
shuffle is derived from (seed, epoch) so a checkpoint resume reproduces an
uninterrupted run bitwise.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import autograd as ag
from .heads import HeadConfig
from .validation import InvalidInputError, ShapeMismatchError, require

MOTIF = (1, 2, 3)  # fixed contiguous pattern for the motif task

CHECKPOINT_MAGIC = b"LOTF"
CHECKPOINT_VERSION = 1


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""


class CheckpointError(ValueError):
    """A checkpoint byte stream is malformed, truncated, or mismatched."""


# ---------------------------------------------------------------------------
# Pivot parameterization


@dataclass
class PivotParams:
    """Free pivot parameters; masses are derived via tempered softmax."""

    locations: np.ndarray   # (r, d_k)
    mass_logits: np.ndarray  # (r,)
    mass_temperature: float = 1.0

    @property
    def masses(self) -> np.ndarray:
        return pivot_masses_from_logits(self.mass_logits, self.mass_temperature)


def pivot_masses_from_logits(logits, tau: float) -> np.ndarray:
    """softmax(logits / tau): strictly positive, sums to 1 for any logits."""
    require(tau > 0, "mass temperature must be > 0")
    logits = np.asarray(logits, dtype=np.float64)
    shifted = logits / tau
    shifted = shifted - shifted.max()
    weights = np.exp(shifted)
    return weights / weights.sum()


# ---------------------------------------------------------------------------
# Synthetic tasks


@dataclass(frozen=True)
class ToyTaskSpec:
    """Deterministic synthetic sequence-classification task.

    ``motif``: label 1 iff the fixed contiguous trigram MOTIF occurs
    (positives plant 1-3 copies); negatives receive the same motif tokens at
    scattered positions so token counts carry no signal and the model must
    detect adjacency.  ``majority``: label is the most frequent token class
    (token % classes), ties to the smallest class index.
    """

    kind: str = "motif"
    seq_len: int = 64
    vocab_size: int = 10
    embed_dim: int = 16
    num_classes: int = 2
    train_size: int = 192
    seed: int = 0

    def __post_init__(self):
        require(self.kind in ("motif", "majority"), f"unknown task kind {self.kind!r}")
        require(self.seq_len >= 4, "seq_len must be >= 4")
        if self.kind == "motif":
            require(self.vocab_size > len(MOTIF), "vocabulary smaller than the motif")
            require(self.num_classes == 2, "motif task is binary")
        require(self.num_classes >= 2, "need at least two classes")
        require(self.train_size >= 2, "train_size must be >= 2")


def _contains_motif(seq: np.ndarray) -> bool:
    for i in range(len(seq) - len(MOTIF) + 1):
        if tuple(seq[i : i + len(MOTIF)]) == MOTIF:
            return True
    return False


def _scatter_without_motif(seq: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Place the motif tokens at rejected-sampled positions without adjacency."""
    n = len(seq)
    for _ in range(1000):
        cand = seq.copy()
        pos = rng.choice(n, size=len(MOTIF), replace=False)
        cand[pos] = MOTIF
        if not _contains_motif(cand):
            return cand
    raise RuntimeError("could not scatter motif tokens without forming the motif")


def majority_label(seq: np.ndarray, num_classes: int) -> int:
    counts = np.bincount(np.asarray(seq) % num_classes, minlength=num_classes)
    return int(counts.argmax())  # argmax ties to the smallest index


def generate_synthetic_task(spec: ToyTaskSpec) -> tuple[np.ndarray, np.ndarray]:
    """(token sequences (N, n) int64, labels (N,) int64), balanced within +-1."""
    rng = np.random.default_rng(spec.seed)
    n, size = spec.seq_len, spec.train_size
    tokens = np.zeros((size, n), dtype=np.int64)
    labels = np.zeros(size, dtype=np.int64)

    if spec.kind == "motif":
        max_copies = 3
        for i in range(size):
            base = rng.integers(0, spec.vocab_size, size=n)
            copies = int(rng.integers(1, max_copies + 1))
            positive = i % 2 == 0
            if positive:
                starts = rng.choice(n - len(MOTIF) + 1, size=copies, replace=False)
                for pos in sorted(starts):
                    base[pos : pos + len(MOTIF)] = MOTIF
            else:
                # same number of motif-token triples, scattered: token counts
                # match the positives so only adjacency separates the classes
                for _ in range(copies):
                    base = _scatter_without_motif(base, rng)
            tokens[i] = base
            labels[i] = int(positive)
    else:
        for i in range(size):
            target = i % spec.num_classes
            seq = rng.integers(0, spec.vocab_size, size=n)
            class_tokens = np.arange(spec.vocab_size)[np.arange(spec.vocab_size) % spec.num_classes == target]
            while majority_label(seq, spec.num_classes) != target:
                counts = np.bincount(seq % spec.num_classes, minlength=spec.num_classes)
                rival = int(counts.argmax())
                rival_positions = np.flatnonzero(seq % spec.num_classes == rival)
                swap = int(rng.choice(rival_positions))
                seq[swap] = int(rng.choice(class_tokens))
            tokens[i] = seq
            labels[i] = target

    order = rng.permutation(size)
    return tokens[order], labels[order]


# ---------------------------------------------------------------------------
# Model


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 12
    embed_dim: int = 16
    d_k: int = 8
    d_v: int = 8
    num_classes: int = 2
    head: HeadConfig = field(default_factory=lambda: HeadConfig(cls_mode="full_ds", pivot_rank=8))
    mass_temperature: float = 1.0
    readout: str = "mean"          # "mean" over token rows or "cls" row 0
    readout_activation: str = "tanh"  # "tanh" | "none"; applied before pooling
    residual: bool = True          # standard block: add (conv'd) values to the mix
    ffn_dim: int = 0               # per-token hidden layer after attention (0 = off)
    qk_projection: str = "learned"  # "learned" W_Q/W_K or "identity" (scores on raw embeddings)
    freeze_pivot: bool = False

    def __post_init__(self):
        require(self.readout in ("mean", "cls"), "readout must be 'mean' or 'cls'")
        require(self.readout_activation in ("tanh", "none"), "readout_activation must be 'tanh' or 'none'")
        require(self.mass_temperature > 0, "mass_temperature must be > 0")
        require(self.ffn_dim >= 0, "ffn_dim must be >= 0")
        require(self.qk_projection in ("learned", "identity"), "qk_projection must be 'learned' or 'identity'")
        if self.qk_projection == "identity":
            require(self.d_k == self.embed_dim, "identity q/k projection needs d_k == embed_dim")

    def to_dict(self) -> dict:
        return asdict(self)

    def param_shapes(self) -> dict[str, tuple]:
        """Checkpoint block order is the iteration order of this dict."""
        shapes = {
            "embedding": (self.vocab_size, self.embed_dim),
            "cls_embed": (self.embed_dim,),
            "w_v": (self.d_v, self.embed_dim),
            "pivot_locations": (self.head.pivot_rank, self.d_k),
            "mass_logits": (self.head.pivot_rank,),
            "readout_weight": (self.num_classes, self.ffn_dim or self.d_v),
            "readout_bias": (self.num_classes,),
        }
        if self.qk_projection == "learned":
            shapes["w_q"] = (self.d_k, self.embed_dim)
            shapes["w_k"] = (self.d_k, self.embed_dim)
        if self.head.dwc_kernel > 0:
            shapes["dwc_weights"] = (self.head.dwc_kernel, self.d_v)
        if self.ffn_dim > 0:
            shapes["ffn_weight"] = (self.ffn_dim, self.d_v)
            shapes["ffn_bias"] = (self.ffn_dim,)
        return shapes


@dataclass(frozen=True)
class OptimizerConfig:
    """Adam with adaptive moments; weight decay omitted at toy scale."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 32

    def to_dict(self) -> dict:
        return asdict(self)


def init_params(cfg: ModelConfig, seed: int) -> dict[str, np.ndarray]:
    """Unit-scale token embeddings, Xavier projections, near-identity conv.

    Pivot locations are drawn at the same scale as projected tokens
    (unit Gaussian over 1/sqrt(d_k)); mass logits start at zero (uniform
    masses through the tempered softmax).
    """
    rng = np.random.default_rng(seed)
    d_in, d_k = cfg.embed_dim, cfg.d_k
    params = {
        "embedding": rng.normal(size=(cfg.vocab_size, d_in)),
        "cls_embed": rng.normal(size=d_in),
        "w_v": rng.normal(size=(cfg.d_v, d_in)) / np.sqrt(d_in),
        "pivot_locations": rng.normal(size=(cfg.head.pivot_rank, d_k)) / np.sqrt(d_k),
        "mass_logits": np.zeros(cfg.head.pivot_rank),
        "readout_weight": rng.normal(size=(cfg.num_classes, cfg.ffn_dim or cfg.d_v)) / np.sqrt(cfg.ffn_dim or cfg.d_v),
        "readout_bias": np.zeros(cfg.num_classes),
    }
    if cfg.qk_projection == "learned":
        params["w_q"] = rng.normal(size=(d_k, d_in)) / np.sqrt(d_in)
        params["w_k"] = rng.normal(size=(d_k, d_in)) / np.sqrt(d_in)
    if cfg.head.dwc_kernel > 0:
        # near-identity taps: start close to the no-conv head but with the
        # tap symmetry broken so neighbor filters can differentiate
        dwc = 0.1 * rng.normal(size=(cfg.head.dwc_kernel, cfg.d_v))
        dwc[cfg.head.dwc_kernel // 2] += 1.0
        params["dwc_weights"] = dwc
    if cfg.ffn_dim > 0:
        params["ffn_weight"] = rng.normal(size=(cfg.ffn_dim, cfg.d_v)) / np.sqrt(cfg.d_v)
        params["ffn_bias"] = np.zeros(cfg.ffn_dim)
    return params


def classifier_loss_graph(params_nodes: dict, token_ids: np.ndarray, label: int, cfg: ModelConfig):
    """(loss_node, logits_value) for one sequence; mirrors heads.attention_with_cls."""
    head = cfg.head
    X = ag.gather_rows(params_nodes["embedding"], token_ids)
    X_full = ag.concat_rows([ag.expand_dims(params_nodes["cls_embed"], 0), X])
    if cfg.qk_projection == "identity":
        Q = X_full
        K = X_full
    else:
        Q = ag.matmul(X_full, ag.transpose(params_nodes["w_q"]))
        K = ag.matmul(X_full, ag.transpose(params_nodes["w_k"]))
    V = ag.matmul(X_full, ag.transpose(params_nodes["w_v"]))
    if head.dwc_kernel > 0:
        V = ag.depthwise_conv(V, params_nodes["dwc_weights"])
    sigma, log_sigma = ag.pivot_mass_graph(params_nodes["mass_logits"], cfg.mass_temperature)
    locations = params_nodes["pivot_locations"]

    if head.cls_mode == "full_ds":
        out = ag.lot_attention_graph(Q, K, V, locations, sigma, log_sigma, head.epsilon, head.sinkhorn_iters)
    else:
        n_plus_1 = token_ids.shape[0] + 1
        token_out = ag.lot_attention_graph(
            ag.get_rows(Q, 1, n_plus_1), ag.get_rows(K, 1, n_plus_1), ag.get_rows(V, 1, n_plus_1),
            locations, sigma, log_sigma, head.epsilon, head.sinkhorn_iters,
        )
        q_cls = ag.get_index(Q, 0)
        if head.cls_mode == "cls_softmax":
            row_logits = ag.mul(ag.matmul(K, q_cls), head.resolve_beta(cfg.d_k))
        else:
            q_pos, q_neg = ag.relu(q_cls), ag.relu(ag.neg(q_cls))
            k_pos, k_neg = ag.relu(K), ag.relu(ag.neg(K))
            same = ag.add(ag.matmul(k_pos, q_pos), ag.matmul(k_neg, q_neg))
            opposite = ag.add(ag.matmul(k_neg, q_pos), ag.matmul(k_pos, q_neg))
            row_logits = ag.add(ag.power(same, head.p_s), ag.power(opposite, head.p_o))
        weights = ag.softmax_1d(row_logits)
        cls_out = ag.matmul(ag.transpose(V), weights)
        out = ag.concat_rows([ag.expand_dims(cls_out, 0), token_out])

    if cfg.residual:
        out = ag.add(out, V)
    if cfg.ffn_dim > 0:
        out = ag.tanh(
            ag.add(
                ag.matmul(out, ag.transpose(params_nodes["ffn_weight"])),
                ag.expand_dims(params_nodes["ffn_bias"], 0),
            )
        )

    if cfg.readout == "cls":
        pooled = ag.get_index(out, 0)
    else:
        token_rows = ag.get_rows(out, 1, token_ids.shape[0] + 1)
        if cfg.readout_activation == "tanh" and cfg.ffn_dim == 0:
            token_rows = ag.tanh(token_rows)
        pooled = ag.mul(ag.sum_axis(token_rows, axis=0), 1.0 / token_ids.shape[0])

    logits = ag.add(ag.matmul(params_nodes["readout_weight"], pooled), params_nodes["readout_bias"])
    loss = ag.sub(ag.logsumexp(logits, axis=0), ag.get_index(logits, int(label)))
    return loss, logits.value


def predict_logits(params: dict, token_ids: np.ndarray, cfg: ModelConfig) -> np.ndarray:
    nodes = {name: ag.constant(value) for name, value in params.items()}
    _, logits = classifier_loss_graph(nodes, token_ids, 0, cfg)
    return logits


# ---------------------------------------------------------------------------
# Optimizer and training loop


@dataclass
class TrainingState:
    params: dict[str, np.ndarray]
    adam_m: dict[str, np.ndarray]
    adam_v: dict[str, np.ndarray]
    adam_t: int
    epoch: int
    model: ModelConfig
    opt: OptimizerConfig


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    loss: float
    accuracy: float
    pivot_location_grad_norm: float
    mass_logit_grad_norm: float


def config_hash(model: ModelConfig, opt: OptimizerConfig) -> bytes:
    payload = json.dumps({"model": model.to_dict(), "opt": opt.to_dict()}, sort_keys=True)
    return hashlib.sha256(payload.encode()).digest()


def new_state(model: ModelConfig, opt: OptimizerConfig, seed: int) -> TrainingState:
    params = init_params(model, seed)
    zeros = {k: np.zeros_like(v) for k, v in params.items()}
    return TrainingState(
        params=params,
        adam_m=zeros,
        adam_v={k: np.zeros_like(v) for k, v in params.items()},
        adam_t=0,
        epoch=0,
        model=model,
        opt=opt,
    )


def _adam_step(state: TrainingState, grads: dict[str, np.ndarray]) -> None:
    opt = state.opt
    state.adam_t += 1
    t = state.adam_t
    for name, g in grads.items():
        m = state.adam_m[name]
        v = state.adam_v[name]
        m *= opt.beta1
        m += (1 - opt.beta1) * g
        v *= opt.beta2
        v += (1 - opt.beta2) * g * g
        m_hat = m / (1 - opt.beta1**t)
        v_hat = v / (1 - opt.beta2**t)
        state.params[name] -= opt.lr * m_hat / (np.sqrt(v_hat) + opt.eps)


def _epoch_shuffle(seed: int, epoch: int, size: int) -> np.ndarray:
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(epoch,)))
    return rng.permutation(size)


def fit_arrays(
    tokens: np.ndarray,
    labels: np.ndarray,
    state: TrainingState,
    epochs: int,
    seed: int,
) -> list[EpochRecord]:
    """Train in place from ``state.epoch`` up to ``epochs`` total epochs.

    Deterministic and resumable: the shuffle for epoch e depends only on
    (seed, e), so training 2 epochs, checkpointing, and training 1 more is
    bitwise identical to training 3 epochs straight through.
    """
    tokens = np.asarray(tokens, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    require(tokens.ndim == 2 and labels.ndim == 1, "tokens must be (N, n), labels (N,)")
    require(tokens.shape[0] == labels.shape[0], "tokens/labels length mismatch", ShapeMismatchError)
    require(int(tokens.max()) < state.model.vocab_size, "token id out of range")
    cfg = state.model
    history: list[EpochRecord] = []

    while state.epoch < epochs:
        order = _epoch_shuffle(seed, state.epoch, tokens.shape[0])
        epoch_loss = 0.0
        grad_norm_loc = 0.0
        grad_norm_logit = 0.0
        batches = 0
        for start in range(0, len(order), state.opt.batch_size):
            batch = order[start : start + state.opt.batch_size]
            grads = {k: np.zeros_like(v) for k, v in state.params.items()}
            batch_loss = 0.0
            for idx in batch:
                nodes = {name: ag.leaf(value) for name, value in state.params.items()}
                loss_node, _ = classifier_loss_graph(nodes, tokens[idx], labels[idx], cfg)
                loss_value = float(loss_node.value)
                if not np.isfinite(loss_value):
                    raise DivergenceError(
                        f"non-finite loss at epoch {state.epoch}, sample {int(idx)}"
                    )
                batch_loss += loss_value
                table = ag.backward(loss_node, np.asarray(1.0 / len(batch)))
                for name, node in nodes.items():
                    g = table.get(id(node))
                    if g is not None:
                        grads[name] += g
            if cfg.freeze_pivot:
                grads["pivot_locations"][:] = 0.0
                grads["mass_logits"][:] = 0.0
            grad_norm_loc += float(np.linalg.norm(grads["pivot_locations"]))
            grad_norm_logit += float(np.linalg.norm(grads["mass_logits"]))
            _adam_step(state, grads)
            masses = pivot_masses_from_logits(state.params["mass_logits"], cfg.mass_temperature)
            require(bool(np.all(masses > 0)), "pivot masses lost positivity")
            epoch_loss += batch_loss
            batches += 1

        accuracy = evaluate_accuracy(state.params, tokens, labels, cfg)
        history.append(
            EpochRecord(
                epoch=state.epoch,
                loss=epoch_loss / len(order),
                accuracy=accuracy,
                pivot_location_grad_norm=grad_norm_loc / batches,
                mass_logit_grad_norm=grad_norm_logit / batches,
            )
        )
        state.epoch += 1
    return history


def evaluate_accuracy(params: dict, tokens: np.ndarray, labels: np.ndarray, cfg: ModelConfig) -> float:
    hits = 0
    for seq, label in zip(tokens, labels):
        logits = predict_logits(params, seq, cfg)
        hits += int(int(np.argmax(logits)) == int(label))
    return hits / len(labels)


@dataclass(frozen=True)
class TrainingResult:
    history: list[EpochRecord]
    state: TrainingState


def train_toy_classifier(
    task: ToyTaskSpec,
    model: ModelConfig | None = None,
    opt: OptimizerConfig | None = None,
    epochs: int = 30,
) -> TrainingResult:
    """Generate the task, build a fresh model, and train for ``epochs``."""
    if model is None:
        model = default_model_for(task)
    if opt is None:
        opt = default_optimizer()
    require(model.vocab_size >= task.vocab_size, "model vocab must cover task vocab")
    tokens, labels = generate_synthetic_task(task)
    state = new_state(model, opt, seed=task.seed)
    history = fit_arrays(tokens, labels, state, epochs=epochs, seed=task.seed)
    return TrainingResult(history=history, state=state)


def default_model_for(task: ToyTaskSpec, **head_overrides) -> ModelConfig:
    """Tuned single-block recipe for the toy tasks.

    Queries and keys are the raw embeddings (identity projection), so the
    transport geometry is controlled by the pivot alone: a frozen pivot
    leaves the attention structure fixed while the learned one adapts it.
    The readout pools tanh of the mixed token rows.
    """
    head = HeadConfig(
        cls_mode="full_ds",
        epsilon=head_overrides.pop("epsilon", 1.0),
        sinkhorn_iters=head_overrides.pop("sinkhorn_iters", 10),
        pivot_rank=head_overrides.pop("pivot_rank", 8),
        dwc_kernel=head_overrides.pop("dwc_kernel", 3),
        **head_overrides,
    )
    return ModelConfig(
        vocab_size=task.vocab_size,
        embed_dim=task.embed_dim,
        d_k=task.embed_dim,
        d_v=32,
        num_classes=task.num_classes,
        head=head,
        readout="mean",
        residual=False,
        ffn_dim=0,
        qk_projection="identity",
    )


def default_optimizer() -> OptimizerConfig:
    # toy runs need a hotter step than the full-scale 1e-3 practice: with a
    # 30-epoch budget on 192 samples, 1e-3 undertrains badly
    return OptimizerConfig(lr=4e-2)


# ---------------------------------------------------------------------------
# Checkpoints

# Layout (all little-endian):
#   magic "LOTF" | version u32 | sha256(model+opt config) 32 bytes |
#   block_count u32 | blocks ...
# Each block: count u64 followed by count float64 values.  Block order:
#   epoch (1,), adam_t (1,), then every parameter in ModelConfig.param_shapes()
#   order, then Adam first moments in the same order, then second moments.


def _pack_block(values: np.ndarray) -> bytes:
    flat = np.ascontiguousarray(values, dtype="<f8").ravel()
    return struct.pack("<Q", flat.size) + flat.tobytes()


def save_checkpoint(state: TrainingState) -> bytes:
    shapes = state.model.param_shapes()
    blocks = [np.array([float(state.epoch)]), np.array([float(state.adam_t)])]
    blocks += [state.params[name] for name in shapes]
    blocks += [state.adam_m[name] for name in shapes]
    blocks += [state.adam_v[name] for name in shapes]
    body = b"".join(_pack_block(b) for b in blocks)
    header = CHECKPOINT_MAGIC + struct.pack("<I", CHECKPOINT_VERSION)
    header += config_hash(state.model, state.opt)
    header += struct.pack("<I", len(blocks))
    return header + body


def load_checkpoint(data: bytes, model: ModelConfig, opt: OptimizerConfig) -> TrainingState:
    """Parse and validate a checkpoint against the expected configuration.

    Shape validation happens before the config-hash comparison so that a
    cross-config load (e.g. different pivot rank) surfaces as a shape
    mismatch rather than a bare hash difference.
    """
    if len(data) < 44:
        raise CheckpointError("truncated checkpoint: header incomplete")
    if data[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError("not a LOTF checkpoint (bad magic bytes)")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    stored_hash = data[8:40]
    (block_count,) = struct.unpack_from("<I", data, 40)

    offset = 44
    blocks: list[np.ndarray] = []
    for _ in range(block_count):
        if offset + 8 > len(data):
            raise CheckpointError("truncated checkpoint: missing block header")
        (count,) = struct.unpack_from("<Q", data, offset)
        offset += 8
        end = offset + 8 * count
        if end > len(data):
            raise CheckpointError("truncated checkpoint: missing block payload")
        blocks.append(np.frombuffer(data[offset:end], dtype="<f8").copy())
        offset = end
    if offset != len(data):
        raise CheckpointError("trailing bytes after final block")

    shapes = model.param_shapes()
    expected_blocks = 2 + 3 * len(shapes)
    if block_count != expected_blocks:
        raise ShapeMismatchError(
            f"checkpoint has {block_count} blocks, config expects {expected_blocks}"
        )
    names = list(shapes)
    for group in range(3):
        for i, name in enumerate(names):
            block = blocks[2 + group * len(names) + i]
            expected = int(np.prod(shapes[name]))
            if block.size != expected:
                raise ShapeMismatchError(
                    f"checkpoint block for {name!r} has {block.size} values, expected {expected}"
                )
    if stored_hash != config_hash(model, opt):
        raise CheckpointError("checkpoint config hash does not match expected configuration")

    def unpack(group: int) -> dict[str, np.ndarray]:
        out = {}
        for i, name in enumerate(names):
            out[name] = blocks[2 + group * len(names) + i].reshape(shapes[name])
        return out

    return TrainingState(
        params=unpack(0),
        adam_m=unpack(1),
        adam_v=unpack(2),
        adam_t=int(blocks[1][0]),
        epoch=int(blocks[0][0]),
        model=model,
        opt=opt,
    )
