"""
Deterministic synthetic long-range tasks and the byte-level corpus.

Synthetic vocabularies reserve BLANK=0 and DELIM=1; payload symbols are
2..vocab_size-1. Every sample is a pure function of (spec, seed, index) and
comes as (tokens, targets, loss_mask), each of length seq_len. Positions with
loss_mask == 0 carry BLANK as a placeholder target.

Batch file layout (little-endian):

    magic     8 bytes  b'HGRNBTCH'
    version   u32      BATCH_FORMAT_VERSION
    kind      u32      index into TASK_KINDS
    count     u32      number of samples
    seq_len   u32
    count times: tokens int32 x seq_len, targets int32 x seq_len, mask uint8 x seq_len
"""

import logging
import struct
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from lib.errors import ConfigError, ContractError

logger = logging.getLogger(__name__)

BLANK = 0
DELIM = 1
RESERVED = 2
BYTE_VOCAB = 256
TASK_KINDS = ('copy', 'selective_copy', 'induction', 'byte_lm')
BATCH_MAGIC = b'HGRNBTCH'
BATCH_FORMAT_VERSION = 1


@dataclass
class TaskSpec:
    kind: str = 'byte_lm'
    seq_len: int = 256
    payload_len: int = 8
    vocab_size: int = 16
    seed: int = 0

    def __post_init__(self):
        if self.kind not in TASK_KINDS:
            raise ConfigError(f"unknown task kind '{self.kind}', expected one of {TASK_KINDS}")
        if self.kind == 'byte_lm':
            return
        if self.payload_len < 1 or self.payload_len >= self.seq_len:
            raise ContractError(f"payload_len must lie in [1, seq_len), got {self.payload_len} for seq_len {self.seq_len}")
        if self.vocab_size <= RESERVED + 1:
            raise ContractError(f"vocab_size {self.vocab_size} leaves no payload symbols beside BLANK and DELIM")

    @property
    def alphabet(self):
        return self.vocab_size - RESERVED

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, data):
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in data.items() if k in known})


def _rng(spec, index):
    return np.random.default_rng([spec.seed, index])


def chance_accuracy(spec):
    """Answer-token accuracy of uniform guessing over the answer alphabet"""
    if spec.kind == 'induction':
        return 1.0 / (spec.alphabet - spec.alphabet // 2)
    return 1.0 / spec.alphabet


def gen_copy(spec, index=0):
    """payload, BLANK gap, DELIM, then the payload is emitted from DELIM on"""
    L, p = spec.seq_len, spec.payload_len
    if L < 2 * p + 1:
        raise ContractError(f"copy task needs seq_len >= 2*payload_len+1, got {L} for payload {p}")
    payload = _rng(spec, index).integers(RESERVED, spec.vocab_size, size=p)
    gap = L - 2 * p
    tokens = np.full(L, BLANK, dtype=np.int64)
    tokens[:p] = payload
    delim_at = p + gap
    tokens[delim_at] = DELIM
    return _answer(tokens, payload, delim_at)


def _answer(tokens, payload, start):
    targets = np.full(tokens.shape, BLANK, dtype=np.int64)
    mask = np.zeros(tokens.shape, dtype=np.uint8)
    targets[start:start + len(payload)] = payload
    mask[start:start + len(payload)] = 1
    return tokens, targets, mask


def selective_copy_sample(payload, positions, seq_len):
    """
    Place payload tokens at `positions` among BLANKs, then DELIM; the answer
    is the payload in index order of its positions.
    """
    payload = np.asarray(payload, dtype=np.int64)
    positions = np.asarray(positions, dtype=np.int64)
    p = len(payload)
    region = seq_len - p
    if len(positions) != p or len(set(positions.tolist())) != p:
        raise ContractError("selective copy needs one distinct position per payload token")
    if positions.min() < 0 or positions.max() >= region:
        raise ContractError(f"payload positions must lie in [0, {region})")
    tokens = np.full(seq_len, BLANK, dtype=np.int64)
    order = np.argsort(positions, kind='stable')
    tokens[positions[order]] = payload[order]
    tokens[region] = DELIM
    return _answer(tokens, payload[order], region)


def gen_selective_copy(spec, index=0):
    L, p = spec.seq_len, spec.payload_len
    if L < 2 * p + 1:
        raise ContractError(f"selective copy needs seq_len >= 2*payload_len+1, got {L} for payload {p}")
    rng = _rng(spec, index)
    payload = rng.integers(RESERVED, spec.vocab_size, size=p)
    positions = np.sort(rng.choice(L - p, size=p, replace=False))
    return selective_copy_sample(payload, positions, L)


def induction_sample(keys, values, slots, query, seq_len):
    """
    Key/value pairs written as adjacent tokens at the given 2-wide slots; the
    final token is the query key and its target is the paired value.
    """
    keys = list(keys)
    if query not in keys:
        raise ContractError(f"query key {query} is not among the stored keys")
    tokens = np.full(seq_len, BLANK, dtype=np.int64)
    for key, value, slot in zip(keys, values, slots):
        tokens[2 * slot] = key
        tokens[2 * slot + 1] = value
    tokens[-1] = query
    targets = np.full(seq_len, BLANK, dtype=np.int64)
    mask = np.zeros(seq_len, dtype=np.uint8)
    targets[-1] = values[keys.index(query)]
    mask[-1] = 1
    return tokens, targets, mask


def gen_induction(spec, index=0):
    L, p = spec.seq_len, spec.payload_len
    num_keys = spec.alphabet // 2
    if num_keys < 1 or p > num_keys:
        raise ContractError(f"induction needs payload_len <= {num_keys} distinct keys")
    num_slots = (L - 1) // 2
    if p > num_slots:
        raise ContractError(f"induction needs seq_len >= 2*payload_len+1, got {L} for payload {p}")
    rng = _rng(spec, index)
    keys = rng.choice(num_keys, size=p, replace=False) + RESERVED
    values = rng.integers(0, spec.alphabet - num_keys, size=p) + RESERVED + num_keys
    slots = rng.choice(num_slots, size=p, replace=False)
    query = int(keys[rng.integers(0, p)])
    return induction_sample(keys.tolist(), values.tolist(), slots.tolist(), query, L)


GENERATORS = {
    'copy': gen_copy,
    'selective_copy': gen_selective_copy,
    'induction': gen_induction,
}


def generate(spec, index=0):
    if spec.kind not in GENERATORS:
        raise ContractError(f"task kind '{spec.kind}' has no sample generator")
    return GENERATORS[spec.kind](spec, index)


def task_batch(spec, batch_size, start_index):
    samples = [generate(spec, start_index + i) for i in range(batch_size)]
    tokens, targets, mask = (np.stack(part) for part in zip(*samples))
    return tokens, targets, mask


def task_stream(spec, batch_size, start_index=0):
    """Endless batches; batch i covers sample indices [start + i*B, start + (i+1)*B)"""
    index = start_index
    while True:
        yield task_batch(spec, batch_size, index)
        index += batch_size


# -- byte corpus ------------------------------------------------------------------

def tokenize(data):
    return np.frombuffer(bytes(data), dtype=np.uint8).astype(np.int64)


def detokenize(tokens):
    tokens = np.asarray(tokens)
    if tokens.size and (tokens.min() < 0 or tokens.max() >= BYTE_VOCAB):
        raise ContractError("byte tokens must lie in [0, 256)")
    return tokens.astype(np.uint8).tobytes()


def load_byte_corpus(path, split_ratio=0.9):
    """Contiguous train/val split of a raw byte file"""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"corpus file not found: {path}")
    if not 0.0 < split_ratio < 1.0:
        raise ConfigError(f"split ratio must lie in (0, 1), got {split_ratio}")
    with open(path, 'rb') as f:
        data = f.read()
    if not data:
        raise ContractError(f"corpus file is empty: {path}")
    tokens = tokenize(data)
    cut = int(len(tokens) * split_ratio)
    train, val = tokens[:cut].copy(), tokens[cut:].copy()
    logger.info(f"Corpus {path}: {len(train)} train / {len(val)} val bytes")
    return train, val


def stationary_bytes(length, seed, alphabet=16, concentration=0.3):
    """
    Seeded first-order Markov chain over `alphabet` byte symbols starting at
    its stationary distribution, so every window has the same statistics.
    """
    rng = np.random.default_rng(seed)
    transition = rng.dirichlet(np.full(alphabet, concentration), size=alphabet)
    eigvals, eigvecs = np.linalg.eig(transition.T)
    stationary = np.real(eigvecs[:, np.argmin(np.abs(eigvals - 1.0))])
    stationary = np.abs(stationary) / np.abs(stationary).sum()
    cumulative = np.cumsum(transition, axis=1)
    out = np.empty(length, dtype=np.int64)
    state = int(rng.choice(alphabet, p=stationary))
    draws = rng.random(length)
    for i in range(length):
        out[i] = state
        state = min(int(np.searchsorted(cumulative[state], draws[i], side='right')), alphabet - 1)
    # printable symbols starting at 'a'
    return out + ord('a')


def corpus_windows(tokens, seq_len):
    """Non-overlapping (input, target) windows of exactly seq_len tokens"""
    tokens = np.asarray(tokens, dtype=np.int64)
    if seq_len < 1:
        raise ContractError(f"window length must be >= 1, got {seq_len}")
    if len(tokens) < seq_len + 1:
        raise ContractError(
            f"corpus of {len(tokens)} tokens is too short for length {seq_len} (needs {seq_len + 1})"
        )
    starts = range(0, len(tokens) - seq_len, seq_len)
    return [(tokens[s:s + seq_len], tokens[s + 1:s + seq_len + 1]) for s in starts]


def corpus_stream(tokens, seq_len, batch_size, seed):
    """
    Endless (tokens, targets, mask) batches of fixed seq_len drawn from a
    seeded shuffle of window offsets, reshuffled on every pass.
    """
    tokens = np.asarray(tokens, dtype=np.int64)
    if len(tokens) < seq_len + 1:
        raise ContractError(f"corpus of {len(tokens)} tokens is shorter than one window of {seq_len + 1}")
    rng = np.random.default_rng(seed)
    offsets = np.arange(0, len(tokens) - seq_len, seq_len)
    order = rng.permutation(offsets)
    cursor = 0
    while True:
        picked = []
        while len(picked) < batch_size:
            if cursor == len(order):
                order = rng.permutation(offsets)
                cursor = 0
            picked.append(order[cursor])
            cursor += 1
        x = np.stack([tokens[o:o + seq_len] for o in picked])
        y = np.stack([tokens[o + 1:o + seq_len + 1] for o in picked])
        yield x, y, np.ones_like(x, dtype=np.uint8)


# -- batch files ----------------------------------------------------------------

def write_batch_file(path, kind, tokens, targets, mask):
    tokens = np.asarray(tokens)
    count, seq_len = tokens.shape
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'wb') as f:
        f.write(BATCH_MAGIC)
        f.write(struct.pack('<IIII', BATCH_FORMAT_VERSION, TASK_KINDS.index(kind), count, seq_len))
        for i in range(count):
            f.write(np.ascontiguousarray(tokens[i], dtype='<i4').tobytes())
            f.write(np.ascontiguousarray(targets[i], dtype='<i4').tobytes())
            f.write(np.ascontiguousarray(mask[i], dtype='u1').tobytes())
    logger.info(f"Wrote {count} {kind} samples to {path}")
    return path


def read_batch_file(path):
    with open(path, 'rb') as f:
        data = f.read()
    if data[:len(BATCH_MAGIC)] != BATCH_MAGIC:
        raise ContractError(f"{path} is not a batch file")
    version, kind_index, count, seq_len = struct.unpack_from('<IIII', data, len(BATCH_MAGIC))
    if version != BATCH_FORMAT_VERSION:
        raise ContractError(f"unsupported batch file version {version}")
    offset = len(BATCH_MAGIC) + 16
    tokens = np.empty((count, seq_len), dtype=np.int64)
    targets = np.empty((count, seq_len), dtype=np.int64)
    mask = np.empty((count, seq_len), dtype=np.uint8)
    for i in range(count):
        tokens[i] = np.frombuffer(data, dtype='<i4', count=seq_len, offset=offset)
        offset += 4 * seq_len
        targets[i] = np.frombuffer(data, dtype='<i4', count=seq_len, offset=offset)
        offset += 4 * seq_len
        mask[i] = np.frombuffer(data, dtype='u1', count=seq_len, offset=offset)
        offset += seq_len
    return TASK_KINDS[kind_index], tokens, targets, mask
