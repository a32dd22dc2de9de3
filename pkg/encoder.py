"""Sentence encoder for day-strings.

Token embedding + learned positional embedding, a stack of pre-norm
transformer encoder layers, then mean pooling over non-PAD positions and
(optionally) L2 normalisation. PAD is always the last id of the vocabulary.
"""

import dataclasses
import hashlib
import json
import logging
import math
import struct
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from csv_helper import ensure_parent
from errors import CheckpointError, EncoderError, SequenceLengthError

logger = logging.getLogger(__name__)

MAX_LEN = 256
LAYER_NORM_EPS = 1e-5

CHECKPOINT_MAGIC = b'DAYEMBCK'
CHECKPOINT_VERSION = 1
_DIGEST_SIZE = 32


@dataclass(frozen=True)
class EncoderConfig:
    vocab_size: int = 8
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    d_ff: int = 128
    max_len: int = MAX_LEN
    normalize_output: bool = True

    def __post_init__(self):
        if self.vocab_size < 2:
            raise EncoderError(f"vocab_size must be >= 2, got {self.vocab_size}")
        if self.d_model <= 0 or self.n_heads <= 0 or self.d_ff <= 0 or self.n_layers < 0:
            raise EncoderError("d_model, n_heads, d_ff must be positive and n_layers >= 0")
        if self.d_model % self.n_heads:
            raise EncoderError(f"d_model ({self.d_model}) must be divisible by n_heads ({self.n_heads})")
        if self.max_len != MAX_LEN:
            raise EncoderError(f"max_len is fixed at {MAX_LEN}")

    @property
    def pad_id(self) -> int:
        return self.vocab_size - 1

    def to_dict(self):
        return dataclasses.asdict(self)


class EncoderLayer(nn.Module):
    def __init__(self, config: EncoderConfig):
        super().__init__()
        d = config.d_model
        self.n_heads = config.n_heads
        self.ln1 = nn.LayerNorm(d, eps=LAYER_NORM_EPS)
        self.q = nn.Linear(d, d, bias=False)
        self.k = nn.Linear(d, d, bias=False)
        self.v = nn.Linear(d, d, bias=False)
        self.o = nn.Linear(d, d, bias=False)
        self.ln2 = nn.LayerNorm(d, eps=LAYER_NORM_EPS)
        self.ff_in = nn.Linear(d, config.d_ff)
        self.ff_out = nn.Linear(config.d_ff, d)

    def attention(self, h: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        b, n, d = h.shape
        dh = d // self.n_heads

        def split(t):
            return t.view(b, n, self.n_heads, dh).transpose(1, 2)

        q, k, v = split(self.q(h)), split(self.k(h)), split(self.v(h))
        scores = q @ k.transpose(-2, -1) / math.sqrt(dh)
        scores = scores.masked_fill(~mask[:, None, None, :], float('-inf'))
        weights = torch.softmax(scores, dim=-1)
        out = (weights @ v).transpose(1, 2).reshape(b, n, d)
        return self.o(out)

    def forward(self, x: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        x = x + self.attention(self.ln1(x), mask)
        x = x + self.ff_out(F.gelu(self.ff_in(self.ln2(x))))
        return x


class SentenceEncoder(nn.Module):
    """All trainable parameters of the encoder (ModelParams)."""

    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.config = config
        self.token_embeddings = nn.Parameter(torch.zeros(config.vocab_size, config.d_model))
        self.positional_embeddings = nn.Parameter(torch.zeros(config.max_len, config.d_model))
        self.layers = nn.ModuleList([EncoderLayer(config) for _ in range(config.n_layers)])

    def forward(self, ids: torch.Tensor, mask: Optional[torch.Tensor] = None) -> torch.Tensor:
        """ids: (batch, length) -> (batch, d_model) sentence embeddings."""
        if mask is None:
            mask = ids != self.config.pad_id
        n = ids.shape[1]
        x = self.token_embeddings[ids] + self.positional_embeddings[:n]
        for layer in self.layers:
            x = layer(x, mask)
        weights = mask.unsqueeze(-1).to(x.dtype)
        pooled = (x * weights).sum(dim=1) / weights.sum(dim=1)
        if self.config.normalize_output:
            pooled = pooled / pooled.norm(dim=-1, keepdim=True)
        return pooled


def param_group(name: str) -> str:
    """Coarse group of a parameter name, used for reporting and weight decay."""
    if name == 'token_embeddings':
        return 'token_embeddings'
    if name == 'positional_embeddings':
        return 'positional_embeddings'
    if '.ln1.' in name or '.ln2.' in name:
        return 'layer_norm'
    if '.ff_' in name:
        return 'feed_forward'
    return 'attention'


def init_params(config: EncoderConfig, seed: int = 0) -> SentenceEncoder:
    generator = torch.Generator().manual_seed(seed & 0x7FFFFFFFFFFFFFFF)
    model = SentenceEncoder(config)
    bound = 1.0 / math.sqrt(config.d_model)
    with torch.no_grad():
        model.token_embeddings.normal_(0.0, 1.0, generator=generator)
        model.positional_embeddings.normal_(0.0, 0.02, generator=generator)
        for layer in model.layers:
            for linear in (layer.q, layer.k, layer.v, layer.o, layer.ff_in, layer.ff_out):
                linear.weight.uniform_(-bound, bound, generator=generator)
                if linear.bias is not None:
                    linear.bias.zero_()
            for norm in (layer.ln1, layer.ln2):
                norm.weight.fill_(1.0)
                norm.bias.zero_()
    return model


# ----------------------------------------------------------------------------
# Encoding
# ----------------------------------------------------------------------------
def _check_ids(ids: Sequence[int], config: EncoderConfig):
    if not 1 <= len(ids) <= config.max_len - 1:
        raise SequenceLengthError(f"sequence length must be in [1, {config.max_len - 1}], got {len(ids)}")
    for i in ids:
        if not 0 <= int(i) < config.vocab_size:
            raise EncoderError(f"token id {i} outside vocabulary of size {config.vocab_size}")


def pad_batch(sequences: Sequence[Sequence[int]], config: EncoderConfig) -> torch.Tensor:
    for seq in sequences:
        _check_ids(seq, config)
    width = max(len(seq) for seq in sequences)
    ids = torch.full((len(sequences), width), config.pad_id, dtype=torch.long)
    for row, seq in enumerate(sequences):
        ids[row, :len(seq)] = torch.as_tensor(list(seq), dtype=torch.long)
    return ids


def forward_ids(params: SentenceEncoder, sequences: Sequence[Sequence[int]]) -> torch.Tensor:
    """Differentiable batch forward; used by the trainer."""
    ids = pad_batch(sequences, params.config)
    mask = ids != params.config.pad_id
    if not bool(mask.any(dim=1).all()):
        raise EncoderError("every sequence needs at least one non-PAD token")
    return params(ids, mask)


def encode(params: SentenceEncoder, config: EncoderConfig, token_ids: Sequence[int]) -> np.ndarray:
    return encode_batch(params, config, [token_ids])[0]


def encode_batch(params: SentenceEncoder, config: EncoderConfig,
                 sequences: Sequence[Sequence[int]], batch_size: int = 256) -> np.ndarray:
    if config != params.config:
        raise EncoderError("config does not match the parameters' config")
    outputs = []
    with torch.no_grad():
        for start in range(0, len(sequences), batch_size):
            outputs.append(forward_ids(params, sequences[start:start + batch_size]).cpu().numpy())
    if not outputs:
        return np.zeros((0, config.d_model), dtype=np.float32)
    vectors = np.concatenate(outputs, axis=0)
    if not np.isfinite(vectors).all():
        raise EncoderError("non-finite sentence embedding")
    return vectors


def embed_corpus(params: SentenceEncoder, config: EncoderConfig, corpus, vocab, batch_size: int = 256):
    """Encode a day-string corpus into an EmbeddingStore."""
    from daystring import tokenize
    from store import EmbeddingStore

    sequences = [tokenize(record.text, vocab) for record in corpus]
    vectors = encode_batch(params, config, sequences, batch_size=batch_size)
    logger.info(f"Embedded {len(corpus)} days into {config.d_model} dimensions")
    return EmbeddingStore.from_records(
        (record.participant_id, record.date, vector) for record, vector in zip(corpus, vectors))


# ----------------------------------------------------------------------------
# Pretrained token embeddings
# ----------------------------------------------------------------------------
def load_pretrained_token_embeddings(path, vocab, params: SentenceEncoder,
                                     aliases: Optional[Dict[str, str]] = None) -> Tuple[SentenceEncoder, int]:
    """Replace token-embedding rows with vectors from a word-vector text file.

    Each line is ``word v1 ... v_d`` with d = d_model. ``aliases`` maps a
    vocabulary token to the word looked up in the file (Lounge -> living_room).
    Returns the parameters and the number of rows replaced.
    """
    d_model = params.config.d_model
    vectors: Dict[str, List[float]] = {}
    with open(path, 'r', encoding='utf-8') as f:
        for line_no, line in enumerate(f, start=1):
            parts = line.split()
            if not parts:
                continue
            if line_no == 1 and len(parts) == 2 and all(p.isdigit() for p in parts):
                continue  # word2vec "count dim" header
            word, values = parts[0], parts[1:]
            if len(values) != d_model:
                raise EncoderError(
                    f"{path} line {line_no}: vector for {word!r} has {len(values)} values, expected {d_model}")
            if word in vectors:
                raise EncoderError(f"{path} line {line_no}: duplicate vector for {word!r}")
            try:
                vectors[word] = [float(v) for v in values]
            except ValueError:
                raise EncoderError(f"{path} line {line_no}: non-numeric value")

    aliases = aliases or {}
    replaced = 0
    with torch.no_grad():
        for token in vocab:
            word = aliases.get(token, token)
            if word in vectors:
                params.token_embeddings[vocab.id_of(token)] = torch.tensor(
                    vectors[word], dtype=params.token_embeddings.dtype)
                replaced += 1
    if replaced == 0:
        logger.warning(f"No vocabulary token found in {path}; token embeddings unchanged")
    else:
        logger.info(f"Replaced {replaced} token embedding row(s) from {path}")
    return params, replaced


# ----------------------------------------------------------------------------
# Checkpoints
# ----------------------------------------------------------------------------
def save_checkpoint(params: SentenceEncoder, config: EncoderConfig, path, _version: int = CHECKPOINT_VERSION):
    """Binary container: magic, version, JSON header, float32 LE tensors, sha256."""
    tensors = []
    blobs = []
    offset = 0
    for name, tensor in params.state_dict().items():
        data = tensor.detach().cpu().numpy().astype('<f4').tobytes()
        tensors.append({"name": name, "shape": list(tensor.shape), "offset": offset, "length": len(data)})
        blobs.append(data)
        offset += len(data)
    header = json.dumps({"version": _version, "config": config.to_dict(), "tensors": tensors},
                        sort_keys=True).encode('utf-8')
    body = CHECKPOINT_MAGIC + struct.pack('<IQ', _version, len(header)) + header + b''.join(blobs)
    ensure_parent(path)
    with open(path, 'wb') as f:
        f.write(body + hashlib.sha256(body).digest())


def load_checkpoint(path) -> Tuple[SentenceEncoder, EncoderConfig]:
    try:
        with open(path, 'rb') as f:
            raw = f.read()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}")
    prefix = len(CHECKPOINT_MAGIC) + struct.calcsize('<IQ')
    if not raw.startswith(CHECKPOINT_MAGIC):
        raise CheckpointError(f"{path} is not a checkpoint file")
    if len(raw) < prefix + _DIGEST_SIZE:
        raise CheckpointError(f"{path}: checksum mismatch (file truncated)")
    body, digest = raw[:-_DIGEST_SIZE], raw[-_DIGEST_SIZE:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError(f"{path}: checksum mismatch (file corrupt or truncated)")
    version, header_len = struct.unpack('<IQ', body[len(CHECKPOINT_MAGIC):prefix])
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: checkpoint version {version}, expected {CHECKPOINT_VERSION}")
    header = json.loads(body[prefix:prefix + header_len].decode('utf-8'))
    config = EncoderConfig(**header["config"])
    blob = body[prefix + header_len:]
    state = {}
    for entry in header["tensors"]:
        chunk = blob[entry["offset"]:entry["offset"] + entry["length"]]
        array = np.frombuffer(chunk, dtype='<f4').reshape(entry["shape"])
        state[entry["name"]] = torch.from_numpy(array.astype(np.float32))
    params = SentenceEncoder(config)
    try:
        params.load_state_dict(state)
    except RuntimeError as e:
        raise CheckpointError(f"{path}: tensors do not match config ({e})")
    return params, config
