"""
Loss, optimizer, learning-rate schedule, training and evaluation loops,
and the finite-difference gradient check
"""

import csv
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np
from tqdm import tqdm

from lib.checkpoint import save_checkpoint
from lib.errors import ConfigError, ContractError, DimensionError, NumericError, TrainingAborted
from lib.model import HGRN, ModelConfig
from lib.tasks import corpus_windows, task_batch
from lib.tensor import PRECISIONS, Tape, emit, fault_injection, precision

logger = logging.getLogger(__name__)

SCHEDULES = ('inverse_sqrt', 'cosine')
METRICS_COLUMNS = ['step', 'train_loss', 'val_loss', 'val_ppl', 'lr', 'wall_ms', 'val_accuracy']
VAL_INDEX_OFFSET = 1_000_000_000
FD_STEP = 1e-5


@dataclass
class TrainConfig:
    peak_lr: float = 5e-4
    betas: Tuple[float, float] = (0.9, 0.98)
    adam_eps: float = 1e-8
    weight_decay: float = 0.2
    warmup_steps: int = 400
    total_steps: int = 5000
    schedule: str = 'inverse_sqrt'
    grad_clip: Optional[float] = None
    batch_size: int = 16
    seq_len: int = 256
    seed: int = 0
    precision: str = 'f32'
    log_interval: int = 100
    val_batches: int = 4

    def __post_init__(self):
        self.betas = tuple(self.betas)
        if self.peak_lr <= 0:
            raise ConfigError(f"train.peak_lr must be > 0, got {self.peak_lr}")
        if self.total_steps < 1:
            raise ConfigError(f"train.total_steps must be >= 1, got {self.total_steps}")
        if not 0 <= self.warmup_steps <= self.total_steps:
            raise ConfigError(
                f"train.warmup_steps ({self.warmup_steps}) must lie in [0, total_steps={self.total_steps}]"
            )
        if self.schedule not in SCHEDULES:
            raise ConfigError(f"unknown schedule '{self.schedule}', expected one of {SCHEDULES}")
        if self.precision not in PRECISIONS:
            raise ConfigError(f"train.precision must be one of {sorted(PRECISIONS)}, got '{self.precision}'")
        if len(self.betas) != 2 or not all(0.0 <= b < 1.0 for b in self.betas):
            raise ConfigError(f"train.betas must be two values in [0, 1), got {list(self.betas)}")
        if self.grad_clip is not None and self.grad_clip <= 0:
            raise ConfigError(f"train.grad_clip must be positive when set, got {self.grad_clip}")
        if self.batch_size < 1 or self.seq_len < 1 or self.log_interval < 1 or self.val_batches < 1:
            raise ConfigError("train.batch_size, seq_len, log_interval and val_batches must all be >= 1")

    def to_dict(self):
        data = asdict(self)
        data['betas'] = list(self.betas)
        return data

    @classmethod
    def from_dict(cls, data):
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**data)


@dataclass
class MetricsRecord:
    step: int
    train_loss: Optional[float]
    val_loss: Optional[float]
    val_ppl: Optional[float]
    lr: Optional[float]
    wall_ms: float
    val_accuracy: Optional[float] = None

    def as_row(self):
        return ['' if getattr(self, name) is None else getattr(self, name) for name in METRICS_COLUMNS]


def perplexity(loss):
    return math.exp(loss)


# -- loss -------------------------------------------------------------------

def _log_softmax(logits):
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def _check_targets(targets, rows, vocab):
    targets = np.asarray(targets, dtype=np.int64).reshape(-1)
    if targets.shape[0] != rows:
        raise DimensionError(f"cross_entropy: {targets.shape[0]} targets for {rows} logit rows")
    if targets.size and (targets.min() < 0 or targets.max() >= vocab):
        raise ContractError(f"cross_entropy: target id outside [0, {vocab})")
    return targets


def _mask_weights(mask, rows):
    if mask is None:
        return np.ones(rows)
    weights = np.asarray(mask, dtype=np.float64).reshape(-1)
    if weights.shape[0] != rows:
        raise DimensionError(f"cross_entropy: mask of {weights.shape[0]} entries for {rows} rows")
    if weights.sum() <= 0:
        raise ContractError("cross_entropy: every position is masked out")
    return weights


def token_nll(logits, targets):
    """Per-row negative log-likelihood of `targets` under raw `logits`"""
    logp = _log_softmax(logits)
    return -logp[np.arange(len(targets)), targets]


def cross_entropy(logits, targets, mask=None):
    """Mean over unmasked positions of -log softmax(logits)[target]"""
    rows, vocab = logits.shape
    targets = _check_targets(targets, rows, vocab)
    weights = _mask_weights(mask, rows).astype(logits.values.dtype)
    count = weights.sum()

    logp = _log_softmax(logits.values)
    nll = -logp[np.arange(rows), targets]
    loss = np.array((weights * nll).sum() / count, dtype=logits.values.dtype)

    def vjp(g):
        grad = np.exp(logp)
        grad[np.arange(rows), targets] -= 1.0
        return [grad * (g * weights / count)[:, None]]

    return emit('cross_entropy', [logits], loss, vjp)


def answer_accuracy(logits, targets, mask):
    """Fraction of unmasked positions whose argmax equals the target"""
    targets = np.asarray(targets).reshape(-1)
    selected = np.asarray(mask).reshape(-1) > 0
    if not selected.any():
        raise ContractError("accuracy needs at least one unmasked position")
    predicted = np.argmax(logits, axis=1)
    return float((predicted[selected] == targets[selected]).mean())


# -- optimizer ----------------------------------------------------------------

def decays(name):
    """Weight decay applies to projection weights and embeddings only"""
    if name == 'lower_bounds' or name.endswith('.theta'):
        return False
    return not (name.endswith('_gain') or name.endswith('_bias'))


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adamw_step(params, grads, state, cfg, step, lr=None):
    """
    One Adam update with bias correction at 1-based `step`; decoupled weight
    decay is applied first whenever cfg.weight_decay > 0.
    """
    if step < 1:
        raise ContractError(f"optimizer steps are 1-based, got {step}")
    lr = lr_at(step, cfg) if lr is None else lr
    beta1, beta2 = cfg.betas
    correction1 = 1.0 - beta1 ** step
    correction2 = 1.0 - beta2 ** step
    for name, param in params.items():
        grad = grads.get(name)
        if grad is None:
            continue
        if grad.shape != param.values.shape:
            raise DimensionError(f"gradient {grad.shape} does not match parameter '{name}' {param.values.shape}")
        if name not in state.m:
            state.m[name] = np.zeros_like(param.values)
            state.v[name] = np.zeros_like(param.values)
        m = state.m[name] = beta1 * state.m[name] + (1.0 - beta1) * grad
        v = state.v[name] = beta2 * state.v[name] + (1.0 - beta2) * grad * grad
        if cfg.weight_decay > 0 and decays(name):
            param.values *= (1.0 - lr * cfg.weight_decay)
        param.values -= lr * (m / correction1) / (np.sqrt(v / correction2) + cfg.adam_eps)
    return lr


def lr_at(step, cfg):
    """Linear warmup to peak, then inverse-sqrt or cosine decay"""
    peak, warmup = cfg.peak_lr, cfg.warmup_steps
    if step < warmup:
        return peak * step / warmup
    if cfg.schedule == 'inverse_sqrt':
        pivot = max(warmup, 1)
        return peak * math.sqrt(pivot / max(step, pivot))
    span = cfg.total_steps - warmup
    progress = 1.0 if span <= 0 else min((step - warmup) / span, 1.0)
    return peak * 0.5 * (1.0 + math.cos(math.pi * progress))


def clip_gradients(grads, max_norm):
    """Global-norm clipping in place; returns the pre-clip norm"""
    total = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if total > max_norm:
        scale = max_norm / (total + 1e-12)
        for g in grads.values():
            g *= scale
        logger.debug(f"Clipped gradient norm {total:.4f} to {max_norm}")
    return total


# -- evaluation -----------------------------------------------------------------

def evaluate_ppl(model, corpus, seq_len, batch_size=8):
    """
    Perplexity over non-overlapping windows of the corpus. Per-token losses
    are summed in float64 so the result does not depend on batching.
    """
    started = time.perf_counter()
    windows = corpus_windows(corpus, seq_len)
    total, count = 0.0, 0
    for start in range(0, len(windows), batch_size):
        chunk = windows[start:start + batch_size]
        x = np.stack([w[0] for w in chunk])
        y = np.stack([w[1] for w in chunk])
        logits = model.forward(x).values.astype(np.float64)
        total += float(token_nll(logits, y.reshape(-1)).sum())
        count += y.size
    loss = total / count
    wall_ms = (time.perf_counter() - started) * 1000.0
    return MetricsRecord(step=0, train_loss=None, val_loss=loss, val_ppl=perplexity(loss), lr=None, wall_ms=wall_ms)


def evaluate_task(model, spec, num_samples, batch_size=8, start_index=VAL_INDEX_OFFSET):
    """Masked loss and answer-token accuracy over held-out task samples"""
    started = time.perf_counter()
    total, count, correct = 0.0, 0.0, 0
    for offset in range(0, num_samples, batch_size):
        size = min(batch_size, num_samples - offset)
        tokens, targets, mask = task_batch(spec, size, start_index + offset)
        logits = model.forward(tokens).values.astype(np.float64)
        flat_targets = targets.reshape(-1)
        weights = mask.reshape(-1).astype(np.float64)
        total += float((weights * token_nll(logits, flat_targets)).sum())
        count += weights.sum()
        selected = weights > 0
        correct += int((np.argmax(logits, axis=1)[selected] == flat_targets[selected]).sum())
    loss = total / count
    wall_ms = (time.perf_counter() - started) * 1000.0
    return MetricsRecord(
        step=0, train_loss=None, val_loss=loss, val_ppl=perplexity(loss), lr=None,
        wall_ms=wall_ms, val_accuracy=correct / count,
    )


# -- training loop ----------------------------------------------------------------

class MetricsLog:
    """metrics.csv for machines and metrics.txt as an aligned table for people"""

    def __init__(self, run_dir):
        self.run_dir = Path(run_dir)
        self.run_dir.mkdir(parents=True, exist_ok=True)
        self.csv_path = self.run_dir / 'metrics.csv'
        self.txt_path = self.run_dir / 'metrics.txt'
        with open(self.csv_path, 'w', newline='') as f:
            csv.writer(f).writerow(METRICS_COLUMNS)
        with open(self.txt_path, 'w') as f:
            f.write(self._line(METRICS_COLUMNS))

    @staticmethod
    def _line(cells):
        return ''.join(f"{cell:>14}" for cell in cells) + '\n'

    def append(self, record):
        with open(self.csv_path, 'a', newline='') as f:
            csv.writer(f).writerow([repr(v) if isinstance(v, float) else v for v in record.as_row()])
        cells = []
        for value in record.as_row():
            cells.append(f"{value:.6g}" if isinstance(value, float) else str(value))
        with open(self.txt_path, 'a') as f:
            f.write(self._line(cells))


def _diagnostics(model, records):
    out = {}
    table = model.lower_bound_table()
    for k in range(model.cfg.layers):
        out[f'layer {k + 1} gamma mean'] = float(table[k].mean())
    for k, record in enumerate(records):
        lam = record.lam
        finite = lam[np.isfinite(lam)]
        if finite.size:
            out[f'layer {k + 1} lambda min/mean/max'] = (
                f"{finite.min():.6g}/{finite.mean():.6g}/{finite.max():.6g}"
            )
        else:
            out[f'layer {k + 1} lambda'] = 'no finite values'
    return out


@dataclass
class TrainResult:
    metrics: List[MetricsRecord]
    best_val_loss: float
    best_checkpoint: Optional[Path]
    final_checkpoint: Optional[Path]


class Trainer:
    """
    Runs total_steps of forward/backward/update over a batch stream of
    (tokens, targets, mask). `validate(model)` returns a MetricsRecord with
    val_loss (and optionally val_accuracy); it is called every log_interval
    steps and at the last step.
    """

    def __init__(self, model, cfg, data_stream, validate=None, run_dir=None, on_record=None):
        self.model = model
        self.cfg = cfg
        self.data_stream = data_stream
        self.validate = validate
        self.run_dir = Path(run_dir) if run_dir else None
        self.on_record = on_record
        self.state = AdamState()
        self.metrics = []
        self.best_val_loss = math.inf

    def _step(self, step, tokens, targets, mask):
        model = self.model
        model.zero_grad()
        records = []
        try:
            with Tape() as tape:
                logits = model.forward(tokens, records)
                loss = cross_entropy(logits, targets, mask)
                value = loss.item()
                if not math.isfinite(value):
                    raise NumericError('loss')
                tape.backward(loss)
        except NumericError as e:
            raise TrainingAborted(step, {'stage': e.stage, **_diagnostics(model, records)})

        named = model.parameters()
        grads = {name: t.grad for name, t in named.items() if t.grad is not None}
        if self.cfg.grad_clip is not None:
            clip_gradients(grads, self.cfg.grad_clip)
        lr = adamw_step(named, grads, self.state, self.cfg, step)
        return value, lr

    def run(self):
        cfg = self.cfg
        log = MetricsLog(self.run_dir) if self.run_dir else None
        best_path = final_path = None
        started = time.perf_counter()
        logger.info(
            f"Training {self.model.num_parameters()} parameters for {cfg.total_steps} steps "
            f"(batch {cfg.batch_size}, seq_len {cfg.seq_len}, {cfg.precision})"
        )
        progress = tqdm(range(1, cfg.total_steps + 1), desc='train', unit='step', leave=False)
        for step in progress:
            tokens, targets, mask = next(self.data_stream)
            train_loss, lr = self._step(step, tokens, targets, mask.reshape(-1))
            progress.set_postfix(loss=f"{train_loss:.4f}")
            logger.debug(f"step {step} loss {train_loss:.6f} lr {lr:.3e}")

            if step % cfg.log_interval and step != cfg.total_steps:
                continue
            val = self.validate(self.model) if self.validate else None
            record = MetricsRecord(
                step=step,
                train_loss=train_loss,
                val_loss=val.val_loss if val else None,
                val_ppl=val.val_ppl if val else None,
                lr=lr,
                wall_ms=(time.perf_counter() - started) * 1000.0,
                val_accuracy=val.val_accuracy if val else None,
            )
            self.metrics.append(record)
            if log:
                log.append(record)
            if self.on_record:
                self.on_record(record)
            summary = f"Step {step}: train_loss={train_loss:.4f}"
            if val:
                summary += f" val_loss={val.val_loss:.4f} val_ppl={val.val_ppl:.3f}"
                if val.val_accuracy is not None:
                    summary += f" val_acc={val.val_accuracy:.3f}"
            logger.info(summary)

            score = val.val_loss if val else train_loss
            if score < self.best_val_loss:
                self.best_val_loss = score
                if self.run_dir:
                    best_path = save_checkpoint(self.run_dir / 'best.ckpt', self.model)
        progress.close()
        if self.run_dir:
            final_path = save_checkpoint(self.run_dir / 'final.ckpt', self.model)
        return TrainResult(self.metrics, self.best_val_loss, best_path, final_path)


def train(model, data_stream, cfg, validate=None, run_dir=None, on_record=None):
    return Trainer(model, cfg, data_stream, validate, run_dir, on_record).run()


# -- gradient check -------------------------------------------------------------

TINY_MODEL = {'layers': 2, 'width': 4, 'vocab_size': 11}
TINY_SEQ_LEN = 6


@dataclass
class GradCheckEntry:
    name: str
    size: int
    max_rel_error: Optional[float]
    status: str


@dataclass
class GradCheckReport:
    entries: List[GradCheckEntry]
    tolerance: float

    @property
    def passed(self):
        return all(e.status != 'FAIL' for e in self.entries)

    @property
    def max_rel_error(self):
        errors = [e.max_rel_error for e in self.entries if e.max_rel_error is not None]
        return max(errors) if errors else 0.0

    def failing(self):
        return [e.name for e in self.entries if e.status == 'FAIL']


def relative_error(analytic, numeric):
    """max|analytic - numeric| scaled by the largest finite-difference magnitude"""
    return float(np.abs(analytic - numeric).max() / (np.abs(numeric).max() + 1e-8))


def gradient_check_model(cfg_small=None, tolerance=1e-4, frozen=(), corrupt=None, seed=0, seq_len=TINY_SEQ_LEN):
    """
    Compare every parameter's analytic gradient with central finite
    differences on a tiny model in 64-bit mode. `frozen` parameter names are
    skipped; `corrupt=(op, input_index, scale)` perturbs one backward term.
    """
    cfg_small = cfg_small or ModelConfig(**TINY_MODEL)
    with precision('f64'):
        model = HGRN.initialize(cfg_small, seed)
        rng = np.random.default_rng(seed)
        tokens = rng.integers(0, cfg_small.vocab_size, size=seq_len)
        targets = rng.integers(0, cfg_small.vocab_size, size=seq_len)
        named = model.parameters()
        unknown = set(frozen) - set(named)
        if unknown:
            raise ContractError(f"cannot freeze unknown parameters: {sorted(unknown)}")
        for name in frozen:
            named[name].requires_grad = False
            named[name].grad = None

        def loss_value():
            return cross_entropy(model.forward(tokens), targets).item()

        model.zero_grad()
        with Tape() as tape:
            loss = cross_entropy(model.forward(tokens), targets)
            if corrupt:
                with fault_injection(*corrupt):
                    tape.backward(loss)
            else:
                tape.backward(loss)

        entries = []
        for name, param in tqdm(named.items(), desc='gradcheck', unit='param', leave=False):
            if name in frozen:
                entries.append(GradCheckEntry(name, param.size, None, 'SKIP'))
                continue
            flat = param.values.reshape(-1)
            numeric = np.zeros(flat.shape)
            for i in range(flat.size):
                original = flat[i]
                flat[i] = original + FD_STEP
                upper = loss_value()
                flat[i] = original - FD_STEP
                lower = loss_value()
                flat[i] = original
                numeric[i] = (upper - lower) / (2.0 * FD_STEP)
            error = relative_error(param.grad.reshape(-1), numeric)
            status = 'PASS' if error < tolerance else 'FAIL'
            entries.append(GradCheckEntry(name, param.size, error, status))
            logger.debug(f"{name}: max relative error {error:.3e} {status}")
    return GradCheckReport(entries, tolerance)
