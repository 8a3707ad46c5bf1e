"""
dense_prf/encoder.py

Small transformer encoder trained from scratch, in three roles:
 - query encoder and document encoder (one shared parameter set, the baseline)
 - PRF query encoder (a separate copy initialised from the trained baseline)

Also holds the vocabulary, tokenizer, input layouts and checkpoint I/O.

Model notes:
 - learned absolute positions, pre-LN blocks, tanh feed-forward
 - attention logits scaled by 1/sqrt(D/H); padded keys get -inf before softmax
 - the embedding is a linear head over the final layer-normalised [CLS] state
 - every parameter and activation is float64
"""

from __future__ import annotations

import copy
import logging
import math
import re
import struct
import zlib
from collections import Counter
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import torch
from torch import nn

from dense_prf.errors import CorruptIndexError

log = logging.getLogger(__name__)

PAD, CLS, SEP, UNK = "[PAD]", "[CLS]", "[SEP]", "[UNK]"
SPECIAL_TOKENS = (PAD, CLS, SEP, UNK)
PAD_ID, CLS_ID, SEP_ID, UNK_ID = 0, 1, 2, 3

DTYPE = torch.float64
CKPT_MAGIC = b"DPRFCKP1"

_WORD_RE = re.compile(r"\w+")

Span = Tuple[int, int]


# ------------------------------
# Vocabulary / tokenization
# ------------------------------
@dataclass(frozen=True, eq=False)
class Vocabulary:
    """Token list whose position is the id. Specials always occupy ids 0-3."""

    tokens: Tuple[str, ...]

    def __post_init__(self):
        if tuple(self.tokens[: len(SPECIAL_TOKENS)]) != SPECIAL_TOKENS:
            raise ValueError(f"vocabulary must start with {SPECIAL_TOKENS}, got {self.tokens[:4]}")
        index = {t: i for i, t in enumerate(self.tokens)}
        if len(index) != len(self.tokens):
            raise ValueError("vocabulary contains duplicate tokens")
        object.__setattr__(self, "_index", index)

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self._index

    def id_of(self, token: str) -> int:
        return self._index.get(token, UNK_ID)

    def token_of(self, token_id: int) -> str:
        return self.tokens[token_id]

    def save(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text("\n".join(self.tokens) + "\n", encoding="utf-8")
        log.info("Wrote vocabulary: %s (%d tokens)", path, len(self))
        return path

    @classmethod
    def load(cls, path: Union[str, Path]) -> "Vocabulary":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        return cls(tuple(line for line in lines if line))


def words(text: str) -> List[str]:
    """Lowercase and split on whitespace and punctuation."""
    return _WORD_RE.findall(text.lower())


def build_vocab(corpus: Iterable[str], min_count: int = 1) -> Vocabulary:
    """
    Build a vocabulary from an iterable of texts.

    Keeps every token seen at least min_count times, ordered by frequency
    (descending) then lexicographically, after the four special tokens.
    """
    if min_count < 1:
        raise ValueError(f"min_count must be >= 1, got {min_count}")
    counts: Counter = Counter()
    for text in corpus:
        counts.update(words(text))
    if not counts:
        raise ValueError("cannot build a vocabulary from an empty corpus")
    kept = sorted((t for t, c in counts.items() if c >= min_count and t not in SPECIAL_TOKENS),
                  key=lambda t: (-counts[t], t))
    log.info("Vocabulary: %d distinct tokens, %d kept (min_count=%d)", len(counts), len(kept), min_count)
    return Vocabulary(SPECIAL_TOKENS + tuple(kept))


def tokenize(text: str, vocab: Vocabulary) -> List[int]:
    return [vocab.id_of(w) for w in words(text)]


# ------------------------------
# Input layouts
# ------------------------------
@dataclass(frozen=True)
class TokenSequence:
    ids: Tuple[int, ...]
    attention_mask: Tuple[int, ...]

    def __post_init__(self):
        if len(self.ids) != len(self.attention_mask):
            raise ValueError("ids and attention_mask differ in length")
        if not self.ids or self.ids[0] != CLS_ID:
            raise ValueError("sequence must start with [CLS]")

    @property
    def length(self) -> int:
        """Number of real (unpadded) positions."""
        return int(sum(self.attention_mask))

    def padded(self, total: int) -> "TokenSequence":
        """Same real tokens, tail padding adjusted to `total` positions."""
        n = self.length
        if total < n:
            raise ValueError(f"cannot pad a {n}-token sequence to {total}")
        ids = self.ids[:n] + (PAD_ID,) * (total - n)
        return TokenSequence(ids, (1,) * n + (0,) * (total - n))


@dataclass(frozen=True)
class PrfInput:
    """[CLS] q [SEP] d1 [SEP] ... dk [SEP] with half-open spans into seq."""

    seq: TokenSequence
    query_span: Span
    doc_spans: Tuple[Span, ...]

    @property
    def k(self) -> int:
        return len(self.doc_spans)


def _pad(ids: List[int], max_len: int) -> TokenSequence:
    n = len(ids)
    return TokenSequence(tuple(ids) + (PAD_ID,) * (max_len - n), (1,) * n + (0,) * (max_len - n))


def _truncate_query(query_ids: Sequence[int], query_budget: int) -> List[int]:
    q = list(query_ids)[:query_budget]
    if not q:
        raise ValueError("query is empty (nothing left after tokenization/truncation)")
    return q


def build_query_input(query_ids: Sequence[int], max_len: int = 128, query_budget: int = 24) -> TokenSequence:
    """[CLS] q [SEP] padded to max_len; q is tail-truncated to query_budget."""
    q = _truncate_query(query_ids, query_budget)
    if len(q) + 2 > max_len:
        raise ValueError(f"max_len={max_len} cannot hold a {len(q)}-token query")
    return _pad([CLS_ID] + q + [SEP_ID], max_len)


def build_prf_input(
    query_ids: Sequence[int],
    prf_docs: Sequence[Sequence[int]],
    max_len: int = 128,
    query_budget: int = 24,
) -> PrfInput:
    """
    Lay out the query and its feedback documents.

    The query keeps up to query_budget tokens. Documents share what is left
    as one concatenated block that is cut from the tail, so the lowest-ranked
    documents lose tokens first. Every document keeps its [SEP]; a document cut
    away entirely leaves an empty span positioned at that [SEP].
    """
    q = _truncate_query(query_ids, query_budget)
    k = len(prf_docs)
    fixed = 2 + len(q) + k
    if fixed > max_len:
        raise ValueError(f"max_len={max_len} cannot hold a {len(q)}-token query and {k} feedback docs")

    remaining = max_len - fixed
    ids = [CLS_ID] + q + [SEP_ID]
    doc_spans: List[Span] = []
    for doc in prf_docs:
        take = list(doc)[:remaining]
        remaining -= len(take)
        start = len(ids)
        ids.extend(take)
        doc_spans.append((start, len(ids)))
        ids.append(SEP_ID)
    return PrfInput(seq=_pad(ids, max_len), query_span=(1, 1 + len(q)), doc_spans=tuple(doc_spans))


def build_doc_input(doc_ids: Sequence[int], max_len: int = 128) -> TokenSequence:
    """[CLS] d [SEP], tail-truncated to fit max_len. An empty document is allowed."""
    if max_len < 2:
        raise ValueError(f"max_len={max_len} cannot hold [CLS] and [SEP]")
    return _pad([CLS_ID] + list(doc_ids)[: max_len - 2] + [SEP_ID], max_len)


def _as_sequence(inp: Union[TokenSequence, PrfInput]) -> TokenSequence:
    return inp.seq if isinstance(inp, PrfInput) else inp


# ------------------------------
# Model
# ------------------------------
@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 0
    num_layers: int = 2
    num_heads: int = 4
    model_dim: int = 64
    ff_dim: int = 128
    max_len: int = 128
    query_budget: int = 24
    init_std: float = 0.02
    seed: int = 42

    def validate(self) -> List[str]:
        problems = []
        for name in ("num_layers", "num_heads", "model_dim", "ff_dim", "max_len", "query_budget"):
            if getattr(self, name) < 1:
                problems.append(f"model.{name} must be >= 1 (got {getattr(self, name)})")
        if self.num_heads >= 1 and self.model_dim % self.num_heads:
            problems.append(f"model.model_dim={self.model_dim} is not divisible by model.num_heads={self.num_heads}")
        if self.query_budget + 2 > self.max_len:
            problems.append(f"model.query_budget={self.query_budget} does not fit in model.max_len={self.max_len}")
        if self.init_std <= 0:
            problems.append(f"model.init_std must be positive (got {self.init_std})")
        return problems

    @property
    def head_dim(self) -> int:
        return self.model_dim // self.num_heads


@dataclass
class LayerTrace:
    """Last-layer attention internals for one batch."""

    weights: torch.Tensor  # (B, H, T, T)
    values: torch.Tensor  # (B, H, T, dh)
    context: torch.Tensor  # (B, T, D), heads concatenated, before the output projection


class EncoderLayer(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d = cfg.model_dim
        self.num_heads = cfg.num_heads
        self.head_dim = cfg.head_dim
        self.ln_attn = nn.LayerNorm(d)
        self.query = nn.Linear(d, d)
        self.key = nn.Linear(d, d)
        self.value = nn.Linear(d, d)
        self.out = nn.Linear(d, d)
        self.ln_ff = nn.LayerNorm(d)
        self.ff_in = nn.Linear(d, cfg.ff_dim)
        self.ff_out = nn.Linear(cfg.ff_dim, d)

    def _heads(self, x: torch.Tensor) -> torch.Tensor:
        b, t, _ = x.shape
        return x.view(b, t, self.num_heads, self.head_dim).transpose(1, 2)

    def forward(self, x: torch.Tensor, key_mask: torch.Tensor, trace: bool = False):
        b, t, d = x.shape
        h = self.ln_attn(x)
        q, k, v = self._heads(self.query(h)), self._heads(self.key(h)), self._heads(self.value(h))
        logits = (q @ k.transpose(-1, -2)) / math.sqrt(self.head_dim)
        logits = logits.masked_fill(~key_mask[:, None, None, :], float("-inf"))
        weights = torch.softmax(logits, dim=-1)
        context = (weights @ v).transpose(1, 2).reshape(b, t, d)
        x = x + self.out(context)
        x = x + self.ff_out(torch.tanh(self.ff_in(self.ln_ff(x))))
        if trace:
            return x, LayerTrace(weights=weights, values=v, context=context)
        return x, None


class PrfEncoder(nn.Module):
    """Transformer encoder returning one embedding per sequence (its [CLS] output)."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        problems = cfg.validate()
        if cfg.vocab_size < len(SPECIAL_TOKENS):
            problems.append(f"vocab_size={cfg.vocab_size} is smaller than the special-token set")
        if problems:
            raise ValueError("; ".join(problems))
        self.cfg = cfg
        self.tok_emb = nn.Embedding(cfg.vocab_size, cfg.model_dim)
        self.pos_emb = nn.Embedding(cfg.max_len, cfg.model_dim)
        self.layers = nn.ModuleList(EncoderLayer(cfg) for _ in range(cfg.num_layers))
        self.ln_final = nn.LayerNorm(cfg.model_dim)
        self.head = nn.Linear(cfg.model_dim, cfg.model_dim)
        self.to(DTYPE)

    def forward(self, ids: torch.Tensor, mask: torch.Tensor, trace: bool = False):
        t = ids.shape[1]
        if t > self.cfg.max_len:
            raise ValueError(f"sequence length {t} exceeds max_len={self.cfg.max_len}")
        key_mask = mask.bool()
        x = self.tok_emb(ids) + self.pos_emb(torch.arange(t))[None, :, :]
        last = None
        for i, layer in enumerate(self.layers):
            x, tr = layer(x, key_mask, trace=trace and i == len(self.layers) - 1)
            last = tr if tr is not None else last
        emb = self.head(self.ln_final(x[:, 0]))
        return (emb, last) if trace else emb


def init_encoder(cfg: ModelConfig, seed: Optional[int] = None) -> PrfEncoder:
    """New encoder with seeded N(0, init_std) weights, unit LayerNorm gains and zero biases."""
    model = PrfEncoder(cfg)
    gen = torch.Generator().manual_seed(cfg.seed if seed is None else seed)
    with torch.no_grad():
        for name, p in model.named_parameters():
            if name.startswith("ln") or ".ln_" in name:
                p.fill_(1.0 if name.endswith("weight") else 0.0)
            elif name.endswith("bias"):
                p.zero_()
            else:
                p.normal_(0.0, cfg.init_std, generator=gen)
    return model


def clone_encoder(model: PrfEncoder) -> PrfEncoder:
    """Independent copy, used to start the PRF encoder from the trained baseline."""
    return copy.deepcopy(model)


# ------------------------------
# Inference
# ------------------------------
def batch_tensors(seqs: Sequence[TokenSequence]) -> Tuple[torch.Tensor, torch.Tensor]:
    # trailing padding common to the whole batch is dropped; masked keys contribute nothing
    width = max(s.length for s in seqs)
    ids = torch.tensor([s.ids[:width] + (PAD_ID,) * max(0, width - len(s.ids)) for s in seqs], dtype=torch.long)
    mask = torch.tensor([s.attention_mask[:width] + (0,) * max(0, width - len(s.ids)) for s in seqs], dtype=torch.bool)
    return ids, mask


def _check_lengths(model: PrfEncoder, seqs: Sequence[TokenSequence]) -> None:
    for s in seqs:
        if s.length > model.cfg.max_len:
            raise ValueError(f"sequence of {s.length} tokens exceeds max_len={model.cfg.max_len}")


def encode_batch(model: PrfEncoder, inputs: Sequence[Union[TokenSequence, PrfInput]]) -> np.ndarray:
    """Embeddings (len(inputs), D) as float64."""
    seqs = [_as_sequence(i) for i in inputs]
    if not seqs:
        return np.zeros((0, model.cfg.model_dim))
    _check_lengths(model, seqs)
    ids, mask = batch_tensors(seqs)
    with torch.no_grad():
        return model(ids, mask).numpy().copy()


def encode(model: PrfEncoder, inp: Union[TokenSequence, PrfInput]) -> np.ndarray:
    return encode_batch(model, [inp])[0]


@dataclass(frozen=True)
class AttentionRecord:
    """
    cls_attention of one input: last-layer attention from [CLS], summed over heads.

    values has one entry per position of the input sequence (0 on padding).
    head_weights (H, T) and head_values (H, T, dh) are the per-head summands,
    and context (D,) is the [CLS] attention output before the output projection.
    """

    values: np.ndarray
    head_weights: np.ndarray
    head_values: np.ndarray
    context: np.ndarray

    @property
    def num_heads(self) -> int:
        return int(self.head_weights.shape[0])


def cls_attention(model: PrfEncoder, inp: Union[TokenSequence, PrfInput]) -> AttentionRecord:
    seq = _as_sequence(inp)
    _check_lengths(model, [seq])
    ids, mask = batch_tensors([seq])
    with torch.no_grad():
        _, tr = model(ids, mask, trace=True)
    w = tr.weights[0, :, 0, :].numpy()  # (H, width)
    v = tr.values[0].numpy()  # (H, width, dh)
    total = len(seq.ids)
    width = w.shape[1]
    head_weights = np.zeros((w.shape[0], total))
    head_weights[:, :width] = w
    head_values = np.zeros((v.shape[0], total, v.shape[2]))
    head_values[:, :width] = v
    return AttentionRecord(
        values=head_weights.sum(axis=0),
        head_weights=head_weights,
        head_values=head_values,
        context=tr.context[0, 0].numpy().copy(),
    )


# ------------------------------
# Checkpoints
# ------------------------------
def _header_lines(model: PrfEncoder, meta: Mapping[str, object]) -> List[str]:
    lines = [f"{f.name}={getattr(model.cfg, f.name)}" for f in fields(model.cfg)]
    lines += [f"{k}={meta[k]}" for k in sorted(meta)]
    for name, tensor in model.state_dict().items():
        lines.append(f"param.{name}={','.join(str(s) for s in tensor.shape)}")
    return lines


def save_checkpoint(model: PrfEncoder, path: Union[str, Path], meta: Optional[Mapping[str, object]] = None) -> Path:
    """
    Write a self-describing checkpoint.

    Layout: b"DPRFCKP1", u64 header length, UTF-8 key=value header lines
    (model hyperparameters, caller metadata, then one param.<name>=<shape>
    line per tensor in state-dict order), the tensors as float64 little
    endian in that same order, and a CRC32 of everything before it.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta = dict(meta or {})
    for k, v in meta.items():
        if "\n" in str(v) or "=" in str(k):
            raise ValueError(f"checkpoint metadata {k!r} cannot be stored in a key=value header")
    header = ("\n".join(_header_lines(model, meta)) + "\n").encode("utf-8")
    parts = [CKPT_MAGIC, struct.pack("<Q", len(header)), header]
    for tensor in model.state_dict().values():
        parts.append(tensor.detach().numpy().astype("<f8").tobytes(order="C"))
    body = b"".join(parts)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF))
    tmp.replace(path)
    log.debug("Wrote checkpoint: %s", path)
    return path


def _coerce(raw: str, like: object) -> object:
    if isinstance(like, bool):
        return raw == "True"
    if isinstance(like, int):
        return int(raw)
    if isinstance(like, float):
        return float(raw)
    return raw


def load_checkpoint(path: Union[str, Path]) -> Tuple[PrfEncoder, Dict[str, str]]:
    """Returns (model, metadata); metadata holds the non-model header keys as strings."""
    path = Path(path)
    data = path.read_bytes()
    if len(data) < len(CKPT_MAGIC) + 12 or data[: len(CKPT_MAGIC)] != CKPT_MAGIC:
        raise CorruptIndexError(f"{path}: not a checkpoint (bad magic)")
    body, (stored_crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) & 0xFFFFFFFF != stored_crc:
        raise CorruptIndexError(f"{path}: checkpoint checksum mismatch")

    off = len(CKPT_MAGIC)
    (hlen,) = struct.unpack_from("<Q", body, off)
    off += 8
    header = body[off: off + hlen].decode("utf-8")
    off += hlen
    entries = dict(line.split("=", 1) for line in header.splitlines() if line)

    defaults = ModelConfig()
    cfg = ModelConfig(**{f.name: _coerce(entries.pop(f.name), getattr(defaults, f.name))
                         for f in fields(ModelConfig) if f.name in entries})
    model = PrfEncoder(cfg)
    state = model.state_dict()
    shapes = {k[len("param."):]: v for k, v in entries.items() if k.startswith("param.")}
    if list(shapes) != list(state):
        raise CorruptIndexError(f"{path}: parameter table does not match the model layout")

    loaded = {}
    for name, ref in state.items():
        count = ref.numel()
        blob = body[off: off + 8 * count]
        if len(blob) != 8 * count:
            raise CorruptIndexError(f"{path}: tensor {name} truncated")
        loaded[name] = torch.from_numpy(np.frombuffer(blob, dtype="<f8").astype(np.float64).reshape(ref.shape))
        off += 8 * count
    if off != len(body):
        raise CorruptIndexError(f"{path}: {len(body) - off} unexpected trailing bytes")
    model.load_state_dict(loaded)
    meta = {k: v for k, v in entries.items() if not k.startswith("param.")}
    log.debug("Loaded checkpoint: %s (%s)", path, asdict(cfg))
    return model, meta
