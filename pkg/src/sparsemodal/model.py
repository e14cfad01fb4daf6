"""The dense (FE2E) and sparse (MESM) multimodal emotion classifiers.

Per modality: a dense stem convolution, then N blocks (plain conv pairs with
max-pooling in FE2E; attention-gated submanifold blocks in MESM), a linear
flattening, a transformer encoder with a learned CLS element and positional
embeddings, and a small classification head.  Text is encoded by its own
transformer; its CLS vector doubles as the attention query for audio and
vision.  Per-modality logits are fused by a learned softmax-normalized
weighted sum.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from sparsemodal.attention import AttentionParams, crossmodal_block
from sparsemodal.config import ModelConfig
from sparsemodal.metrics import (
    binary_f1,
    confusion_counts,
    mean_over_classes,
    weighted_accuracy,
)
from sparsemodal.signal import CLS_ID, UNK_ID, ModalitySample
from sparsemodal.sparse import FlopsLedger, densify
from sparsemodal.tensor import (
    Adam,
    NumericFailure,
    ParamStore,
    Tensor,
    affine,
    concat,
    conv2d,
    embedding,
    first_nonfinite,
    layer_norm,
    matmul,
    maxpool2,
    relu,
    softmax,
    take_rows,
    weighted_bce_with_logits,
)

logger = logging.getLogger(__name__)

__all__ = [
    "DataSpec",
    "Network",
    "BatchOutput",
    "BlockTrace",
    "EpochRecord",
    "fuse_logits",
    "weighted_bce_loss",
    "train_step",
    "run_training",
    "evaluate",
    "predict_scores",
]

MODALITY_ORDER = ("T", "A", "V")
MODALITY_NAMES = {"T": "text", "A": "audio", "V": "visual"}


@dataclass(frozen=True)
class DataSpec:
    """Input extents the conv branches are built for."""

    frame_channels: int = 3
    frame_h: int = 16
    frame_w: int = 16
    chunk_h: int = 32
    chunk_w: int = 32

    @classmethod
    def from_samples(cls, samples: list[ModalitySample]) -> "DataSpec":
        s = samples[0]
        return cls(frame_channels=s.frames.shape[1],
                   frame_h=s.frames.shape[2], frame_w=s.frames.shape[3],
                   chunk_h=s.audio_chunks.shape[2],
                   chunk_w=s.audio_chunks.shape[3])


@dataclass
class BlockTrace:
    """Scores and selection mask of one sparse block over a forward batch."""

    modality: str
    block: int
    scores: np.ndarray   # (S_total, h, w)
    mask: np.ndarray     # (S_total, h, w) bool
    owners: np.ndarray   # (S_total,) sample index within the batch


@dataclass
class BatchOutput:
    fused: Tensor                      # (B, classes)
    per_modality: dict[str, Tensor]    # modality letter -> (B, classes)
    traces: list[BlockTrace] = field(default_factory=list)


def _pooled(extent: int, times: int) -> int:
    for _ in range(times):
        extent = (extent + 1) // 2
    return extent


class Network:
    """Parameter container plus the forward pass for both model modes."""

    def __init__(self, config: ModelConfig, data_spec: DataSpec,
                 store: ParamStore | None = None):
        config.validate()
        self.config = config
        self.data_spec = data_spec
        self.store = store if store is not None else self._build_params()

    # -- parameters ------------------------------------------------------
    def _channels(self) -> list[int]:
        c = self.config.stem_channels
        return [c * 2 ** j for j in range(self.config.n_blocks + 1)]

    def _build_params(self) -> ParamStore:
        cfg = self.config
        store = ParamStore(seed=cfg.seed)
        d = cfg.d_model
        store.add("text/embed/tokens", (cfg.vocab_size, d),
                  init="fan_in", fan_in=d)
        store.add("text/embed/pos", (cfg.max_text_len, d),
                  init="fan_in", fan_in=d)
        self._add_encoder(store, "text")
        self._add_head(store, "text")
        chans = self._channels()
        for mod, in_ch, hw in (("audio", 1,
                                (self.data_spec.chunk_h, self.data_spec.chunk_w)),
                               ("visual", self.data_spec.frame_channels,
                                (self.data_spec.frame_h, self.data_spec.frame_w))):
            store.add(f"{mod}/stem/kernel", (chans[0], in_ch, 3, 3),
                      init="fan_in", fan_in=in_ch * 9)
            store.add(f"{mod}/stem/bias", (chans[0],))
            for j in range(1, cfg.n_blocks + 1):
                c_in, c_out = chans[j - 1], chans[j]
                store.add(f"{mod}/block{j}/conv1/kernel", (c_out, c_in, 3, 3),
                          init="fan_in", fan_in=c_in * 9)
                store.add(f"{mod}/block{j}/conv1/bias", (c_out,))
                store.add(f"{mod}/block{j}/conv2/kernel", (c_out, c_out, 3, 3),
                          init="fan_in", fan_in=c_out * 9)
                store.add(f"{mod}/block{j}/conv2/bias", (c_out,))
                if cfg.mode == "MESM":
                    AttentionParams.create(store, f"{mod}/attn{j}",
                                           channels=c_in, query_dim=d,
                                           width=cfg.attn_width)
            flat = chans[-1] * _pooled(hw[0], cfg.n_blocks) * \
                _pooled(hw[1], cfg.n_blocks)
            store.add(f"{mod}/flatten/weight", (d, flat),
                      init="fan_in", fan_in=flat)
            store.add(f"{mod}/flatten/bias", (d,))
            store.add(f"{mod}/cls", (d,), init="fan_in", fan_in=d)
            store.add(f"{mod}/embed/pos", (cfg.max_seq_len + 1, d),
                      init="fan_in", fan_in=d)
            self._add_encoder(store, mod)
            self._add_head(store, mod)
        store.add("fusion/weights", (len(MODALITY_ORDER),))
        return store

    def _add_encoder(self, store: ParamStore, mod: str) -> None:
        d = self.config.d_model
        for i in range(self.config.layers):
            base = f"{mod}/enc{i}"
            for ln in ("ln1", "ln2"):
                store.add(f"{base}/{ln}/gain", (d,), init="ones")
                store.add(f"{base}/{ln}/bias", (d,))
            for name in ("query", "key", "value", "out"):
                store.add(f"{base}/attn/{name}/weight", (d, d),
                          init="fan_in", fan_in=d)
                store.add(f"{base}/attn/{name}/bias", (d,))
            store.add(f"{base}/ffn/w1", (4 * d, d), init="fan_in", fan_in=d)
            store.add(f"{base}/ffn/b1", (4 * d,))
            store.add(f"{base}/ffn/w2", (d, 4 * d), init="fan_in", fan_in=4 * d)
            store.add(f"{base}/ffn/b2", (d,))
        store.add(f"{mod}/enc_final/gain", (d,), init="ones")
        store.add(f"{mod}/enc_final/bias", (d,))

    def _add_head(self, store: ParamStore, mod: str) -> None:
        d, classes = self.config.d_model, self.config.classes
        store.add(f"{mod}/head/w1", (d, d), init="fan_in", fan_in=d)
        store.add(f"{mod}/head/b1", (d,))
        store.add(f"{mod}/head/w2", (classes, d), init="fan_in", fan_in=d)
        store.add(f"{mod}/head/b2", (classes,))

    def attention_params(self, mod: str, block: int) -> AttentionParams:
        s = self.store
        base = f"{mod}/attn{block}"
        return AttentionParams(s[f"{base}/map_weight"], s[f"{base}/map_bias"],
                               s[f"{base}/query_weight"],
                               s[f"{base}/score_weight"], s[f"{base}/score_bias"])

    # -- encoders ----------------------------------------------------------
    def _encoder(self, mod: str, x: Tensor,
                 valid: np.ndarray | None = None) -> Tensor:
        """Pre-norm transformer over (B, T, d); returns the row-0 outputs (B, d).

        ``valid`` (B, T) marks real positions; padding rows get zero
        attention weight and therefore contribute no value and no gradient.
        """
        cfg, s = self.config, self.store
        d, heads = cfg.d_model, cfg.heads
        dh = d // heads
        scale = 1.0 / math.sqrt(dh)
        b, t, _ = x.shape
        key_mask = None if valid is None else valid[:, None, None, :]
        for i in range(cfg.layers):
            base = f"{mod}/enc{i}"
            h = layer_norm(x, s[f"{base}/ln1/gain"], s[f"{base}/ln1/bias"])
            q = affine(h, s[f"{base}/attn/query/weight"],
                       s[f"{base}/attn/query/bias"])
            k = affine(h, s[f"{base}/attn/key/weight"],
                       s[f"{base}/attn/key/bias"])
            v = affine(h, s[f"{base}/attn/value/weight"],
                       s[f"{base}/attn/value/bias"])
            q = q.reshape(b, t, heads, dh).transpose(0, 2, 1, 3)
            k = k.reshape(b, t, heads, dh).transpose(0, 2, 1, 3)
            v = v.reshape(b, t, heads, dh).transpose(0, 2, 1, 3)
            att = softmax(matmul(q, k.transpose(0, 1, 3, 2)) * scale,
                          axes=(3,), valid=key_mask)
            ctx = matmul(att, v).transpose(0, 2, 1, 3).reshape(b, t, d)
            x = x + affine(ctx, s[f"{base}/attn/out/weight"],
                           s[f"{base}/attn/out/bias"])
            h2 = layer_norm(x, s[f"{base}/ln2/gain"], s[f"{base}/ln2/bias"])
            ff = affine(relu(affine(h2, s[f"{base}/ffn/w1"],
                                    s[f"{base}/ffn/b1"])),
                        s[f"{base}/ffn/w2"], s[f"{base}/ffn/b2"])
            x = x + ff
        x = layer_norm(x, s[f"{mod}/enc_final/gain"],
                       s[f"{mod}/enc_final/bias"])
        return take_rows(x.reshape(b * t, d), np.arange(b) * t)

    def _clean_tokens(self, tokens: np.ndarray) -> np.ndarray:
        cfg = self.config
        ids = np.asarray(tokens, dtype=np.int64)
        if ids.size == 0 or ids[0] != CLS_ID:
            raise ValueError("token sequence must start with the CLS id")
        if ids.size > cfg.max_text_len:
            logger.warning("text of %d tokens truncated to %d",
                           ids.size, cfg.max_text_len)
            ids = ids[:cfg.max_text_len]
        return np.where((ids >= 0) & (ids < cfg.vocab_size), ids, UNK_ID)

    def encode_text_batch(self, token_seqs: list[np.ndarray]) -> Tensor:
        """CLS outputs (B, d) of the text transformer (padded batch)."""
        cfg, s = self.config, self.store
        ids = [self._clean_tokens(t) for t in token_seqs]
        t_max = max(i.size for i in ids)
        padded = np.full((len(ids), t_max), UNK_ID, dtype=np.int64)
        valid = np.zeros((len(ids), t_max), dtype=bool)
        for row, seq in enumerate(ids):
            padded[row, :seq.size] = seq
            valid[row, :seq.size] = True
        x = embedding(s["text/embed/tokens"], padded) + \
            embedding(s["text/embed/pos"], np.arange(t_max))
        return self._encoder("text", x, valid)

    def encode_text(self, tokens: np.ndarray) -> Tensor:
        """CLS output of the text transformer; also the attention query."""
        return self.encode_text_batch([tokens]).reshape(self.config.d_model)

    def _conv_branch(self, mod: str, elements: np.ndarray,
                     queries: Tensor | None, owners: np.ndarray,
                     ledger: FlopsLedger | None,
                     traces: list[BlockTrace] | None) -> Tensor:
        """Stem + blocks + flatten for a stack of images; returns (S_tot, d)."""
        cfg, s = self.config, self.store
        x = relu(conv2d(Tensor(elements), s[f"{mod}/stem/kernel"],
                        s[f"{mod}/stem/bias"], ledger=ledger,
                        layer=f"{mod}/stem"))
        if cfg.mode == "FE2E":
            for j in range(1, cfg.n_blocks + 1):
                x = relu(conv2d(x, s[f"{mod}/block{j}/conv1/kernel"],
                                s[f"{mod}/block{j}/conv1/bias"], ledger=ledger,
                                layer=f"{mod}/block{j}/conv1"))
                x = relu(conv2d(x, s[f"{mod}/block{j}/conv2/kernel"],
                                s[f"{mod}/block{j}/conv2/bias"], ledger=ledger,
                                layer=f"{mod}/block{j}/conv2"))
                x = maxpool2(x)
            s_tot = x.shape[0]
            flat = x.reshape(s_tot, int(np.prod(x.shape[1:])))
        else:
            q_rows = take_rows(queries, owners)
            cur = x.transpose(1, 0, 2, 3)  # (C, S_tot, H, W)
            for j in range(1, cfg.n_blocks + 1):
                cur, scores, mask = crossmodal_block(
                    cur, q_rows, self.attention_params(mod, j),
                    (s[f"{mod}/block{j}/conv1/kernel"],
                     s[f"{mod}/block{j}/conv1/bias"]),
                    (s[f"{mod}/block{j}/conv2/kernel"],
                     s[f"{mod}/block{j}/conv2/bias"]),
                    p=cfg.top_p, soft_gate=cfg.mask_mode == "soft",
                    ledger=ledger, layer=f"{mod}/block{j}")
                if traces is not None:
                    traces.append(BlockTrace(mod, j, scores.data.copy(),
                                             mask.copy(), owners.copy()))
            dense = densify(cur).transpose(1, 0, 2, 3)
            s_tot = dense.shape[0]
            flat = dense.reshape(s_tot, int(np.prod(dense.shape[1:])))
        return affine(flat, s[f"{mod}/flatten/weight"],
                      s[f"{mod}/flatten/bias"])

    def encode_modality(self, mod: str, stacks: list[np.ndarray],
                        queries: Tensor | None = None,
                        ledger: FlopsLedger | None = None,
                        traces: list[BlockTrace] | None = None) -> Tensor:
        """CLS vectors (B, d) for per-sample sequences of frames or chunks."""
        cfg, s = self.config, self.store
        clipped = []
        for stack in stacks:
            if len(stack) > cfg.max_seq_len:
                logger.warning("%s sequence of %d elements truncated to %d",
                               mod, len(stack), cfg.max_seq_len)
                stack = stack[:cfg.max_seq_len]
            clipped.append(np.asarray(stack, dtype=np.float64))
        counts = [c.shape[0] for c in clipped]
        owners = np.repeat(np.arange(len(clipped)), counts)
        projected = self._conv_branch(mod, np.concatenate(clipped, axis=0),
                                      queries, owners, ledger, traces)
        # pack [CLS; elements] rows into one padded batch; index 0 is the
        # learned CLS row, the last table row stays zero for padding
        batch, d = len(counts), cfg.d_model
        total = int(sum(counts))
        table = concat([s[f"{mod}/cls"].reshape(1, d), projected,
                        Tensor(np.zeros((1, d)))], axis=0)
        t_max = max(counts) + 1
        idx = np.full((batch, t_max), total + 1, dtype=np.int64)
        valid = np.zeros((batch, t_max), dtype=bool)
        start = 0
        for row, count in enumerate(counts):
            idx[row, 0] = 0
            idx[row, 1:count + 1] = 1 + start + np.arange(count)
            valid[row, :count + 1] = True
            start += count
        x = take_rows(table, idx.reshape(-1)).reshape(batch, t_max, d)
        x = x + embedding(s[f"{mod}/embed/pos"], np.arange(t_max))
        return self._encoder(mod, x, valid)

    def _head(self, mod: str, cls_vectors: Tensor) -> Tensor:
        s = self.store
        hidden = relu(affine(cls_vectors, s[f"{mod}/head/w1"],
                             s[f"{mod}/head/b1"]))
        return affine(hidden, s[f"{mod}/head/w2"], s[f"{mod}/head/b2"])

    # -- full forward ------------------------------------------------------
    def forward(self, samples: list[ModalitySample],
                ledger: FlopsLedger | None = None,
                collect_traces: bool = False) -> BatchOutput:
        cfg = self.config
        present = [m for m in MODALITY_ORDER if m in cfg.modalities]
        traces: list[BlockTrace] | None = [] if collect_traces else None
        need_text = "T" in present or cfg.mode == "MESM"
        text_cls = None
        if need_text:
            text_cls = self.encode_text_batch([s.tokens for s in samples])
        per_logits: dict[str, Tensor] = {}
        if "T" in present:
            per_logits["T"] = self._head("text", text_cls)
        if "A" in present:
            cls = self.encode_modality(
                "audio", [s.audio_chunks for s in samples],
                queries=text_cls, ledger=ledger, traces=traces)
            per_logits["A"] = self._head("audio", cls)
        if "V" in present:
            cls = self.encode_modality(
                "visual", [s.frames for s in samples],
                queries=text_cls, ledger=ledger, traces=traces)
            per_logits["V"] = self._head("visual", cls)
        fused = fuse_logits(per_logits, self.store["fusion/weights"])
        return BatchOutput(fused=fused, per_modality=per_logits,
                           traces=traces or [])


def fuse_logits(per_modality: dict[str, Tensor], weights: Tensor) -> Tensor:
    """Softmax-normalized weighted sum over the present modalities.

    Absent modalities are excluded and the weights renormalize over the rest;
    the result is invariant to adding a constant to the weight vector.
    """
    present = [m for m in MODALITY_ORDER if m in per_modality]
    if not present:
        raise ValueError("no modalities to fuse")
    idx = np.array([MODALITY_ORDER.index(m) for m in present])
    w = softmax(take_rows(weights.reshape(len(MODALITY_ORDER), 1), idx),
                axes=(0,))
    stacked = concat([per_modality[m].reshape(1, *per_modality[m].shape)
                      for m in present], axis=0)
    return (stacked * w.reshape(len(present), 1, 1)).sum(axes=(0,))


def weighted_bce_loss(logits: Tensor, labels: np.ndarray,
                      pos_weight: np.ndarray) -> Tensor:
    """Mean weighted binary cross-entropy over batch and classes."""
    return weighted_bce_with_logits(logits, labels, pos_weight)


def train_step(network: Network, samples: list[ModalitySample],
               optimizer: Adam, pos_weight: np.ndarray) -> float:
    """One forward/backward/update pass; aborts on a non-finite loss."""
    network.store.zero_grad()
    out = network.forward(samples)
    labels = np.stack([s.labels for s in samples])
    loss = weighted_bce_loss(out.fused, labels, pos_weight)
    if not np.isfinite(loss.data).all():
        culprit = first_nonfinite(loss) or "loss"
        raise NumericFailure(f"non-finite loss; first bad layer: {culprit}")
    loss.backward()
    optimizer.step()
    return float(loss.data)


def forward_logits(network: Network, samples: list[ModalitySample],
                   batch_size: int | None = None,
                   ledger: FlopsLedger | None = None) -> np.ndarray:
    """Fused logits over batched forward passes, no gradient use."""
    bs = batch_size or network.config.batch_size
    chunks = []
    for start in range(0, len(samples), bs):
        out = network.forward(samples[start:start + bs], ledger=ledger)
        chunks.append(out.fused.data)
    return np.concatenate(chunks, axis=0)


def predict_scores(network: Network, samples: list[ModalitySample],
                   batch_size: int | None = None,
                   ledger: FlopsLedger | None = None) -> np.ndarray:
    """Fused per-class probabilities."""
    return 1.0 / (1.0 + np.exp(-forward_logits(network, samples,
                                               batch_size, ledger)))


def evaluate(network: Network, samples: list[ModalitySample],
             batch_size: int | None = None,
             ledger: FlopsLedger | None = None,
             threshold: float = 0.5,
             pos_weight: np.ndarray | None = None) -> dict:
    """Per-class and mean WAcc / F1 of thresholded fused probabilities."""
    logits = forward_logits(network, samples, batch_size, ledger)
    probs = 1.0 / (1.0 + np.exp(-logits))
    labels = np.stack([s.labels for s in samples])
    counts = confusion_counts(probs >= threshold, labels)
    wacc = [weighted_accuracy(c) for c in counts]
    f1 = [binary_f1(c) for c in counts]
    out = {
        "wacc": wacc,
        "f1": f1,
        "mean_wacc": mean_over_classes(wacc),
        "mean_f1": mean_over_classes(f1),
        "probabilities": probs,
    }
    if pos_weight is not None:
        out["loss"] = float(weighted_bce_with_logits(
            Tensor(logits), labels, pos_weight).data)
    return out


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    valid_loss: float
    valid_wacc: float
    valid_f1: float


def run_training(network: Network, train_samples: list[ModalitySample],
                 valid_samples: list[ModalitySample],
                 pos_weight: np.ndarray, epochs: int | None = None,
                 stop_at_wacc: float | None = None,
                 optimizer: Adam | None = None,
                 ) -> tuple[list[EpochRecord], Adam]:
    """Seeded epoch loop; keeps the best-valid-WAcc weights in the network."""
    cfg = network.config
    epochs = epochs if epochs is not None else cfg.epochs
    opt = optimizer or Adam(network.store, lr=cfg.learning_rate)
    history: list[EpochRecord] = []
    best_wacc = -1.0
    best_data: dict[str, np.ndarray] = {}
    for epoch in range(epochs):
        order = np.random.default_rng(
            np.random.SeedSequence([cfg.seed, epoch])).permutation(
                len(train_samples))
        losses = []
        for start in range(0, len(order), cfg.batch_size):
            batch = [train_samples[i] for i in order[start:start + cfg.batch_size]]
            losses.append(train_step(network, batch, opt, pos_weight))
        if valid_samples:
            stats = evaluate(network, valid_samples, pos_weight=pos_weight)
            record = EpochRecord(epoch, float(np.mean(losses)), stats["loss"],
                                 stats["mean_wacc"], stats["mean_f1"])
            if stats["mean_wacc"] > best_wacc:
                best_wacc = stats["mean_wacc"]
                best_data = {n: t.data.copy() for n, t in network.store.items()}
        else:
            record = EpochRecord(epoch, float(np.mean(losses)),
                                 float("nan"), float("nan"), float("nan"))
        history.append(record)
        logger.info("epoch %d: train %.4f valid_wacc %.4f",
                    epoch, record.train_loss, record.valid_wacc)
        if stop_at_wacc is not None and record.valid_wacc >= stop_at_wacc:
            break
    if best_data:
        for name, t in network.store.items():
            t.data = best_data[name]
    return history, opt


def save_checkpoint(directory, network: Network, optimizer: Adam) -> None:
    """Parameter store binary + config + optimizer state in one directory."""
    from pathlib import Path

    from sparsemodal.config import save_config

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    network.store.save(directory / "params.bin")
    optimizer.save(directory / "adam.bin")
    save_config(network.config, directory / "config.txt")


def load_checkpoint(directory, data_spec: DataSpec) -> tuple[Network, Adam]:
    from pathlib import Path

    from sparsemodal.config import load_config

    directory = Path(directory)
    config = load_config(directory / "config.txt")
    network = Network(config, data_spec)
    network.store.load(directory / "params.bin")
    optimizer = Adam(network.store, lr=config.learning_rate)
    optimizer.load(directory / "adam.bin")
    return network, optimizer
