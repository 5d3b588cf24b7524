"""End-to-end DIN and MSNet models: parameter construction, forward pass,
losses, Adagrad-family optimizer, training loop, prediction, checkpoints.

DIN pools the full behavior sequence with one target attention.  MSNet
splits the sequence by stock type, runs the multi-stock branch as plain
DIN attention, runs the limited-stock branch with meta-enhanced keys and
values, concatenates both interests with the target embedding, and adds an
auxiliary similarity loss that keeps updating sequence item ids even when
attention ignores them.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import zipfile
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .autodiff import (
    GradMap,
    ParamStore,
    SparseRows,
    Tape,
    Tensor,
)
from .datagen import ImpressionRecord, ItemSpec
from .features import (
    Embedded,
    SampleBatch,
    Vocab,
    Vocabs,
    add_embedding_tables,
    build_vocab,
    embed,
    encode_batch,
)
from .metrics import PredictionRecord, partition_of
from .seqmodel import (
    ScoreAccumulator,
    SplitMasks,
    add_attention_params,
    add_meta_params,
    compose_kv,
    identity_scaled,
    identity_shifted,
    meta_scale,
    meta_shift,
    scaling_weights,
    split_sequence,
    target_attention,
)

ARCH_DIN = "din"
ARCH_MSNET = "msnet"


class ModelError(Exception):
    """Configuration, optimizer, or checkpoint failures."""


class CheckpointError(ModelError):
    """Unreadable, corrupt, or incompatible checkpoint."""


@dataclasses.dataclass(frozen=True)
class ModelConfig:
    """Model and training knobs, desk-scaled.

    Production reference points: three MLP layers of 512/256/128 units,
    attention hidden size 128, learning rate 1e-4, batch size 4096, and
    history length 50.  The desk defaults below train in seconds on a CPU
    while keeping the same shape.
    """

    architecture: str = ARCH_MSNET
    d_id: int = 8
    d_side: int = 8
    history_len: int = 20
    n_heads: int = 2
    d_head: int = 8
    mlp_hidden: tuple[int, ...] = (64, 32, 16)
    meta_hidden: int = 16
    alpha: float = 0.1
    learning_rate: float = 1e-2
    adagrad_decay: float = 1.0  # 1.0 is plain Adagrad
    batch_size: int = 256
    epochs: int = 1
    seed: int = 0
    aux_scope: str = "limited_only"  # or "both"
    use_seq_split: bool = True
    use_seq_meta: bool = True
    use_aux_loss: bool = True
    meta_mode: str = "net"  # "identity" forces no-op scaling/shifting
    logit_clamp: float = 15.0

    def validate(self) -> None:
        if self.architecture not in (ARCH_DIN, ARCH_MSNET):
            raise ModelError(f"unknown architecture {self.architecture!r}")
        for field in ("d_id", "d_side", "history_len", "n_heads", "d_head",
                      "meta_hidden", "batch_size"):
            if getattr(self, field) < 1:
                raise ModelError(f"{field} must be positive")
        if self.epochs < 0:
            raise ModelError("epochs must be >= 0")
        if self.alpha < 0:
            raise ModelError("alpha must be >= 0")
        if not (0.0 < self.adagrad_decay <= 1.0):
            raise ModelError("adagrad_decay must lie in (0, 1]")
        if self.aux_scope not in ("limited_only", "both"):
            raise ModelError(f"unknown aux_scope {self.aux_scope!r}")
        if self.meta_mode not in ("net", "identity"):
            raise ModelError(f"unknown meta_mode {self.meta_mode!r}")
        if any(h < 1 for h in self.mlp_hidden):
            raise ModelError("mlp_hidden sizes must be positive")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["mlp_hidden"] = list(self.mlp_hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ModelError(f"unknown model config keys: {sorted(unknown)}")
        d = dict(d)
        if "mlp_hidden" in d:
            d["mlp_hidden"] = tuple(d["mlp_hidden"])
        cfg = cls(**d)
        cfg.validate()
        return cfg

    @property
    def attention_out(self) -> int:
        return self.n_heads * self.d_head

    @property
    def item_dim(self) -> int:
        return self.d_id + self.d_side

    @property
    def n_branches(self) -> int:
        if self.architecture == ARCH_DIN:
            return 1
        return 2 if self.use_seq_split else 1

    @property
    def uses_meta(self) -> bool:
        return self.architecture == ARCH_MSNET and self.use_seq_meta


def config_hash(config: ModelConfig) -> str:
    payload = json.dumps(config.to_dict(), sort_keys=True).encode()
    return hashlib.sha256(payload).hexdigest()[:16]


# ----------------------------------------------------------------------
# parameters


def build_params(config: ModelConfig, vocabs: Vocabs) -> ParamStore:
    """Seeded parameter construction; creation order is fixed so the same
    (config, vocabs) always produces bit-identical initial values."""
    config.validate()
    rng = np.random.default_rng(config.seed)
    params = ParamStore()
    add_embedding_tables(params, vocabs, config.d_id, config.d_side, rng)
    add_attention_params(params, "att.main", config.item_dim,
                         config.n_heads, config.d_head, rng)
    if config.architecture == ARCH_MSNET and config.use_seq_split:
        add_attention_params(params, "att.limited", config.item_dim,
                             config.n_heads, config.d_head, rng)
    if config.uses_meta:
        add_meta_params(params, config.d_id, config.d_side,
                        config.meta_hidden, rng)
    d_in = config.n_branches * config.attention_out + config.item_dim
    for i, width in enumerate(config.mlp_hidden):
        r = 1.0 / np.sqrt(d_in)
        params.add(f"mlp.l{i}.w", rng.uniform(-r, r, size=(d_in, width)))
        params.add(f"mlp.l{i}.b", np.zeros(width))
        d_in = width
    r = 1.0 / np.sqrt(d_in)
    params.add("mlp.out.w", rng.uniform(-r, r, size=(d_in, 1)))
    params.add("mlp.out.b", np.zeros(1))
    return params


# ----------------------------------------------------------------------
# forward


@dataclasses.dataclass
class ForwardOutput:
    p: Tensor                 # [B] probabilities in (0, 1)
    emb: Embedded
    masks: SplitMasks | None  # None when no branch split happened
    # (per-head raw scores, sequence flags mask) per attention branch,
    # detached, for the score diagnostic
    branch_scores: list[tuple[list[np.ndarray], np.ndarray]]


def _meta_kv(tape: Tape, config: ModelConfig, emb: Embedded
             ) -> tuple[Tensor, Tensor, Tensor]:
    """Limited-branch query embedding and final K/V under the configured
    meta mode."""
    if config.meta_mode == "identity":
        scaled_side = identity_scaled(tape, emb.seq_side)
        shifted_id, _ = identity_shifted(tape, emb.seq_side, emb.seq_id)
        q_side = identity_scaled(tape, emb.target_side)
    else:
        scaled_side = meta_scale(tape, emb.seq_id, emb.seq_side)
        shifted_id, _ = meta_shift(tape, emb.seq_side, emb.seq_id)
        q_side = tape.mul(scaling_weights(tape, emb.target_id),
                          emb.target_side)
    final_k, final_v = compose_kv(tape, emb.seq_id, emb.seq_side,
                                  scaled_side, shifted_id)
    query = tape.concat_cols([emb.target_id, q_side])
    return query, final_k, final_v


def _mlp_head(tape: Tape, config: ModelConfig, x: Tensor) -> Tensor:
    for i in range(len(config.mlp_hidden)):
        x = tape.leaky_relu(tape.add_bias(
            tape.matmul(x, tape.param(f"mlp.l{i}.w")),
            tape.param(f"mlp.l{i}.b")))
    logits = tape.add_bias(tape.matmul(x, tape.param("mlp.out.w")),
                           tape.param("mlp.out.b"))
    logits = tape.reshape(logits, (x.values.shape[0],))
    return tape.sigmoid(tape.clamp(logits, -config.logit_clamp,
                                   config.logit_clamp))


def forward(tape: Tape, config: ModelConfig, batch: SampleBatch) -> ForwardOutput:
    emb = embed(tape, batch)
    e_target = tape.concat_cols([emb.target_id, emb.target_side])
    e_seq = tape.concat_cols([emb.seq_id, emb.seq_side])
    branch_scores: list[tuple[list[np.ndarray], np.ndarray]] = []

    if config.architecture == ARCH_DIN:
        att = target_attention(tape, "att.main", e_target, e_seq, e_seq,
                               batch.seq_mask, config.n_heads, config.d_head)
        branch_scores.append((att.raw_scores, batch.seq_mask))
        x = tape.concat_cols([att.interest, e_target])
        return ForwardOutput(p=_mlp_head(tape, config, x), emb=emb,
                             masks=None, branch_scores=branch_scores)

    masks = split_sequence(batch) if config.use_seq_split else None
    interests: list[Tensor] = []
    if config.use_seq_split:
        main = target_attention(tape, "att.main", e_target, e_seq, e_seq,
                                masks.multi, config.n_heads, config.d_head)
        branch_scores.append((main.raw_scores, masks.multi))
        interests.append(main.interest)
        if config.use_seq_meta:
            query, final_k, final_v = _meta_kv(tape, config, emb)
        else:
            query, final_k, final_v = e_target, e_seq, e_seq
        limited = target_attention(tape, "att.limited", query, final_k,
                                   final_v, masks.limited, config.n_heads,
                                   config.d_head)
        branch_scores.append((limited.raw_scores, masks.limited))
        interests.append(limited.interest)
    else:
        if config.use_seq_meta:
            query, final_k, final_v = _meta_kv(tape, config, emb)
        else:
            query, final_k, final_v = e_target, e_seq, e_seq
        single = target_attention(tape, "att.main", query, final_k, final_v,
                                  batch.seq_mask, config.n_heads,
                                  config.d_head)
        branch_scores.append((single.raw_scores, batch.seq_mask))
        interests.append(single.interest)

    x = tape.concat_cols(interests + [e_target])
    return ForwardOutput(p=_mlp_head(tape, config, x), emb=emb, masks=masks,
                         branch_scores=branch_scores)


# ----------------------------------------------------------------------
# losses


def loss_ce(tape: Tape, p: Tensor, labels: np.ndarray) -> Tensor:
    return tape.bce(p, labels)


def aux_scope_mask(config: ModelConfig, batch: SampleBatch,
                   masks: SplitMasks | None) -> np.ndarray:
    if config.aux_scope == "limited_only":
        if masks is not None:
            return masks.limited.reshape(-1)
        return (batch.seq_mask & batch.seq_limited).reshape(-1)
    return batch.seq_mask.reshape(-1)


def loss_aux(tape: Tape, emb: Embedded, scope_mask: np.ndarray,
             history_len: int) -> Tensor:
    """Masked mean squared gap between the (gradient-blocked) side
    similarity and the id similarity of each in-scope sequence position
    against the target."""
    t_side = tape.repeat_rows(emb.target_side, history_len)
    t_id = tape.repeat_rows(emb.target_id, history_len)
    side_sim = tape.cosine_sim_rows(t_side, emb.seq_side)
    id_sim = tape.cosine_sim_rows(t_id, emb.seq_id)
    diff = tape.sub(tape.stop_gradient(side_sim), id_sim)
    return tape.masked_mean(tape.mul(diff, diff), scope_mask)


def total_loss(tape: Tape, ce: Tensor, aux: Tensor | None,
               alpha: float) -> Tensor:
    if aux is None or alpha == 0.0:
        return ce
    return tape.add(ce, tape.scale(aux, alpha))


def compute_losses(tape: Tape, config: ModelConfig, batch: SampleBatch,
                   out: ForwardOutput) -> tuple[Tensor, Tensor | None, Tensor]:
    ce = loss_ce(tape, out.p, batch.labels)
    aux = None
    if (config.architecture == ARCH_MSNET and config.use_aux_loss
            and config.alpha > 0.0):
        aux = loss_aux(tape, out.emb, aux_scope_mask(config, batch, out.masks),
                       batch.history_len)
    return ce, aux, total_loss(tape, ce, aux, config.alpha)


# ----------------------------------------------------------------------
# optimizer


@dataclasses.dataclass
class AdagradState:
    acc: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def for_params(cls, params: ParamStore) -> "AdagradState":
        return cls(acc={n: np.zeros_like(params.values[n])
                        for n in params.names()})


ADAGRAD_EPS = 1e-8


def optimizer_step(params: ParamStore, grads: GradMap, state: AdagradState,
                   lr: float, decay: float = 1.0) -> None:
    """Adagrad with optional accumulator decay.

    acc <- decay*acc + g^2 per touched entry; theta -= lr*g/(sqrt(acc)+eps).
    Embedding rows absent from the batch are left untouched (values and
    accumulators both).  A non-finite gradient aborts the whole step before
    any parameter moves.
    """
    for name in params.names():
        g = grads[name]
        vals = g.rows if isinstance(g, SparseRows) else g
        if not np.isfinite(vals).all():
            raise ModelError(f"non-finite gradient for parameter {name!r}; "
                             "step aborted")
    for name in params.names():
        g = grads[name]
        if isinstance(g, SparseRows):
            if not g.indices.size:
                continue
            acc = state.acc[name][g.indices]
            if decay != 1.0:
                acc *= decay
            acc += g.rows * g.rows
            state.acc[name][g.indices] = acc
            params.values[name][g.indices] -= \
                lr * g.rows / (np.sqrt(acc) + ADAGRAD_EPS)
        else:
            acc = state.acc[name]
            if decay != 1.0:
                acc *= decay
            acc += g * g
            params.values[name] -= lr * g / (np.sqrt(acc) + ADAGRAD_EPS)
    state.step += 1


# ----------------------------------------------------------------------
# training


@dataclasses.dataclass
class EpochLog:
    epoch: int
    mean_ce: float
    mean_aux: float
    mean_total: float
    batches: int

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclasses.dataclass
class TrainResult:
    params: ParamStore
    opt_state: AdagradState
    vocabs: Vocabs
    log: list[EpochLog]
    diverged: bool = False


def fit(records: Sequence[ImpressionRecord], catalog: dict[int, ItemSpec],
        config: ModelConfig, *,
        vocabs: Vocabs | None = None,
        epoch_callback: Callable[[int, "TrainResult"], None] | None = None,
        ) -> TrainResult:
    """Train on the given records, deterministically in config.seed.

    Vocabularies come from the training records unless supplied.  Batches
    are a seeded shuffle, re-drawn per epoch.  If the total loss goes
    non-finite the run aborts, keeping the parameters from the end of the
    last completed epoch.
    """
    if not records:
        raise ModelError("training set is empty")
    config.validate()
    if vocabs is None:
        vocabs = build_vocab(records, catalog)
    params = build_params(config, vocabs)
    state = AdagradState.for_params(params)
    result = TrainResult(params=params, opt_state=state, vocabs=vocabs,
                         log=[])
    full = encode_batch(records, vocabs, catalog, config.history_len)
    shuffle_rng = np.random.default_rng([config.seed, 7])
    n = full.size
    snapshot = (params.copy(), _copy_state(state))
    for epoch in range(1, config.epochs + 1):
        order = shuffle_rng.permutation(n)
        ce_sum = aux_sum = total_sum = 0.0
        n_batches = 0
        for start in range(0, n, config.batch_size):
            rows = order[start:start + config.batch_size]
            batch = _slice_batch(full, rows)
            tape = Tape(params)
            out = forward(tape, config, batch)
            ce, aux, total = compute_losses(tape, config, batch, out)
            total_val = float(total.values)
            if not np.isfinite(total_val):
                result.params, result.opt_state = snapshot
                result.diverged = True
                return result
            grads = tape.backward(total)
            optimizer_step(params, grads, state, config.learning_rate,
                           config.adagrad_decay)
            ce_sum += float(ce.values)
            aux_sum += float(aux.values) if aux is not None else 0.0
            total_sum += total_val
            n_batches += 1
        entry = EpochLog(epoch=epoch,
                         mean_ce=ce_sum / max(n_batches, 1),
                         mean_aux=aux_sum / max(n_batches, 1),
                         mean_total=total_sum / max(n_batches, 1),
                         batches=n_batches)
        result.log.append(entry)
        snapshot = (params.copy(), _copy_state(state))
        if epoch_callback is not None:
            epoch_callback(epoch, result)
    return result


def _copy_state(state: AdagradState) -> AdagradState:
    return AdagradState(acc={k: v.copy() for k, v in state.acc.items()},
                        step=state.step)


def _slice_batch(full: SampleBatch, rows: np.ndarray) -> SampleBatch:
    return SampleBatch(
        target_item=full.target_item[rows],
        target_category=full.target_category[rows],
        seq_item=full.seq_item[rows],
        seq_category=full.seq_category[rows],
        seq_mask=full.seq_mask[rows],
        seq_limited=full.seq_limited[rows],
        labels=full.labels[rows],
        is_new=full.is_new[rows],
        is_limited=full.is_limited[rows],
    )


# ----------------------------------------------------------------------
# prediction and diagnostics


def predict(params: ParamStore, config: ModelConfig,
            records: Sequence[ImpressionRecord], vocabs: Vocabs,
            catalog: dict[int, ItemSpec], *, partition_seed: int = 0,
            score_accumulator: ScoreAccumulator | None = None,
            ) -> list[PredictionRecord]:
    """One prediction per impression, deterministic, in input order."""
    out: list[PredictionRecord] = []
    for start in range(0, len(records), config.batch_size):
        chunk = list(records[start:start + config.batch_size])
        batch = encode_batch(chunk, vocabs, catalog, config.history_len)
        tape = Tape(params)
        fo = forward(tape, config, batch)
        if score_accumulator is not None:
            for raw_scores, mask in fo.branch_scores:
                score_accumulator.add_batch(raw_scores, batch.is_limited,
                                            batch.seq_limited, mask)
        for i, r in enumerate(chunk):
            out.append(PredictionRecord(
                user_id=r.user_id, item_id=r.item_id,
                p=float(fo.p.values[i]), y=int(r.label),
                is_new=r.item_is_new, is_limited=r.item_is_limited,
                partition_id=partition_of(r.user_id, r.item_id,
                                          partition_seed)))
    return out


def attention_score_table(params: ParamStore, config: ModelConfig,
                          records: Sequence[ImpressionRecord], vocabs: Vocabs,
                          catalog: dict[int, ItemSpec]):
    """2x2 mean pre-softmax score table over the dataset (target stock type
    by sequence-item stock type)."""
    acc = ScoreAccumulator()
    predict(params, config, records, vocabs, catalog, score_accumulator=acc)
    return acc.table()


# ----------------------------------------------------------------------
# checkpoints

CHECKPOINT_FORMAT = "ckpt-v1"


def _array_checksum(arrays: dict[str, np.ndarray]) -> str:
    digest = hashlib.sha256()
    for key in sorted(arrays):
        digest.update(key.encode())
        digest.update(np.ascontiguousarray(arrays[key]).tobytes())
    return digest.hexdigest()


def save_checkpoint(path: str | Path, params: ParamStore,
                    opt_state: AdagradState, config: ModelConfig,
                    vocabs: Vocabs, *, dataset_hash: str = "",
                    extra_meta: dict | None = None) -> None:
    path = Path(path)
    arrays: dict[str, np.ndarray] = {}
    for name in params.names():
        arrays[f"param/{name}"] = params.values[name]
        arrays[f"opt/{name}"] = opt_state.acc[name]
    arrays["vocab/items"] = np.asarray(vocabs.item.ordered_values(),
                                       dtype=np.int64)
    arrays["vocab/categories"] = np.asarray(vocabs.category.ordered_values(),
                                            dtype=np.int64)
    meta = {
        "format": CHECKPOINT_FORMAT,
        "config": config.to_dict(),
        "config_hash": config_hash(config),
        "dataset_hash": dataset_hash,
        "opt_step": opt_state.step,
        "embedding_params": sorted(params.embedding_names),
        "checksum": _array_checksum(arrays),
    }
    if extra_meta:
        meta.update(extra_meta)
    tmp = path.with_suffix(path.suffix + ".tmp")
    # write through a handle so savez cannot append its own extension,
    # then swap into place atomically
    with tmp.open("wb") as fh:
        np.savez(fh, __meta__=np.asarray(json.dumps(meta, sort_keys=True)),
                 **arrays)
    tmp.replace(path)


@dataclasses.dataclass
class Checkpoint:
    params: ParamStore
    opt_state: AdagradState
    config: ModelConfig
    vocabs: Vocabs
    meta: dict


def load_checkpoint(path: str | Path,
                    expected_config: ModelConfig | None = None) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        with np.load(path, allow_pickle=False) as data:
            blobs = {k: data[k] for k in data.files}
    except (zipfile.BadZipFile, ValueError, OSError, EOFError) as exc:
        raise CheckpointError(f"corrupt checkpoint {path}: {exc}") from exc
    if "__meta__" not in blobs:
        raise CheckpointError(f"corrupt checkpoint {path}: missing metadata")
    meta = json.loads(str(blobs.pop("__meta__")))
    if meta.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(
            f"unsupported checkpoint format {meta.get('format')!r} "
            f"(want {CHECKPOINT_FORMAT})")
    stored_sum = meta.get("checksum")
    if _array_checksum(blobs) != stored_sum:
        raise CheckpointError(f"checksum mismatch in {path}: file damaged "
                              "or tampered")
    config = ModelConfig.from_dict(meta["config"])
    if meta.get("config_hash") != config_hash(config):
        raise CheckpointError("config hash does not match stored config")
    if expected_config is not None and \
            config_hash(expected_config) != config_hash(config):
        raise CheckpointError(
            f"checkpoint config hash {config_hash(config)} does not match "
            f"expected {config_hash(expected_config)}")
    vocabs = Vocabs(item=Vocab(blobs.pop("vocab/items").tolist()),
                    category=Vocab(blobs.pop("vocab/categories").tolist()))
    params = ParamStore()
    acc: dict[str, np.ndarray] = {}
    emb_names = set(meta.get("embedding_params", []))
    param_names = [k[len("param/"):] for k in blobs if k.startswith("param/")]
    # preserve original creation order via opt arrays pairing
    for name in param_names:
        params.add(name, blobs[f"param/{name}"], embedding=name in emb_names)
        acc[name] = blobs[f"opt/{name}"].copy()
    state = AdagradState(acc=acc, step=int(meta.get("opt_step", 0)))
    return Checkpoint(params=params, opt_state=state, config=config,
                      vocabs=vocabs, meta=meta)
