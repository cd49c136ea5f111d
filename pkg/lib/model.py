"""
Stacked HGRN language model: embedding, H blocks of (HGRU token mixer,
GLU channel mixer) with pre-norm residuals, final norm and vocabulary head.
"""

import logging
from collections import OrderedDict
from dataclasses import asdict, dataclass, field, fields
from typing import List, Optional

import numpy as np

from lib.errors import ConfigError, ContractError, NumericError
from lib.scan import DEFAULT_PARALLEL_THRESHOLD, recurrence
from lib.tensor import (
    Tensor,
    affine,
    cumsum_shifted_dim0,
    embedding,
    flip_rows,
    layer_norm,
    sigmoid,
    silu,
    softmax_dim0,
    take_cols,
    take_row,
    tile_rows,
)

logger = logging.getLogger(__name__)

LOWER_BOUND_MODES = ('monotone', 'none', 'random', 'decreasing', 'only')
UNTIED_INPUT_WEIGHTS = ('gate', 'one')
ROPE_BASE = 10000.0


@dataclass
class ModelConfig:
    """Architecture and ablation switches"""
    layers: int = 2
    width: int = 32
    vocab_size: int = 256
    glu_expansion: Optional[int] = None
    lower_bound_mode: str = 'monotone'
    use_complex: bool = True
    theta_data_dependent: bool = False
    tie_input_gate: bool = True
    untied_input_weight: str = 'gate'
    use_output_gate: bool = True
    norm_eps: float = 1e-5
    seq_len_max: int = 16384
    parallel_threshold: int = DEFAULT_PARALLEL_THRESHOLD

    def __post_init__(self):
        if self.layers < 1:
            raise ConfigError(f"model.layers must be >= 1, got {self.layers}")
        if self.width < 2 or self.width % 2:
            raise ConfigError(f"model.width must be even and >= 2, got {self.width}")
        if self.vocab_size < 2:
            raise ConfigError(f"model.vocab_size must be >= 2, got {self.vocab_size}")
        if self.lower_bound_mode not in LOWER_BOUND_MODES:
            raise ConfigError(f"unknown lower bound mode '{self.lower_bound_mode}', expected one of {LOWER_BOUND_MODES}")
        if self.untied_input_weight not in UNTIED_INPUT_WEIGHTS:
            raise ConfigError(f"model.untied_input_weight must be one of {UNTIED_INPUT_WEIGHTS}")
        if self.glu_expansion is not None and self.glu_expansion < self.width:
            raise ConfigError(f"model.glu_expansion ({self.glu_expansion}) must be >= width ({self.width})")

    @property
    def expansion(self):
        return self.glu_expansion if self.glu_expansion is not None else 2 * self.width

    @property
    def mixer_width(self):
        """Width of [Re(h), Im(h)], or of Re(h) alone without the complex path"""
        return 2 * self.width if self.use_complex else self.width

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, data):
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**data)


@dataclass
class LowerBoundTable:
    gamma: Tensor
    mode: str

    def row(self, k):
        return take_row(self.gamma, k)

    @property
    def values(self):
        return self.gamma.values


@dataclass
class HGRULayerParams:
    mu_weight: Optional[Tensor] = None
    mu_bias: Optional[Tensor] = None
    input_re_weight: Optional[Tensor] = None
    input_re_bias: Optional[Tensor] = None
    input_im_weight: Optional[Tensor] = None
    input_im_bias: Optional[Tensor] = None
    theta: Optional[Tensor] = None
    theta_weight: Optional[Tensor] = None
    theta_bias: Optional[Tensor] = None
    input_gate_weight: Optional[Tensor] = None
    input_gate_bias: Optional[Tensor] = None
    out_gate_weight: Optional[Tensor] = None
    out_gate_bias: Optional[Tensor] = None
    out_norm_gain: Optional[Tensor] = None
    out_norm_bias: Optional[Tensor] = None
    out_proj_weight: Optional[Tensor] = None
    out_proj_bias: Optional[Tensor] = None

    def named(self, prefix):
        return _named_fields(self, prefix)


@dataclass
class GLUParams:
    up_gate_weight: Tensor
    up_value_weight: Tensor
    down_weight: Tensor
    down_bias: Optional[Tensor] = None

    @property
    def expansion(self):
        return self.up_gate_weight.shape[1]

    def named(self, prefix):
        return _named_fields(self, prefix)


@dataclass
class BlockParams:
    token_norm_gain: Tensor
    token_norm_bias: Tensor
    hgru: HGRULayerParams
    channel_norm_gain: Tensor
    channel_norm_bias: Tensor
    glu: GLUParams

    def named(self, prefix):
        out = OrderedDict()
        out[f'{prefix}token_norm_gain'] = self.token_norm_gain
        out[f'{prefix}token_norm_bias'] = self.token_norm_bias
        out.update(self.hgru.named(f'{prefix}hgru.'))
        out[f'{prefix}channel_norm_gain'] = self.channel_norm_gain
        out[f'{prefix}channel_norm_bias'] = self.channel_norm_bias
        out.update(self.glu.named(f'{prefix}glu.'))
        return out


@dataclass
class ModelParams:
    embedding: Tensor
    lower_bounds: Tensor
    blocks: List[BlockParams] = field(default_factory=list)
    final_norm_gain: Optional[Tensor] = None
    final_norm_bias: Optional[Tensor] = None
    head_weight: Optional[Tensor] = None
    head_bias: Optional[Tensor] = None

    def named(self):
        """Every parameter tensor under its stable name, in a fixed order"""
        out = OrderedDict()
        out['embedding'] = self.embedding
        out['lower_bounds'] = self.lower_bounds
        for k, block in enumerate(self.blocks):
            out.update(block.named(f'layers.{k}.'))
        out['final_norm_gain'] = self.final_norm_gain
        out['final_norm_bias'] = self.final_norm_bias
        out['head_weight'] = self.head_weight
        out['head_bias'] = self.head_bias
        return out


def _named_fields(obj, prefix):
    out = OrderedDict()
    for f in fields(obj):
        value = getattr(obj, f.name)
        if value is not None:
            out[f'{prefix}{f.name}'] = value
    return out


@dataclass
class LayerRecord:
    """What one token mixer saw: decay magnitudes, phases and its bound"""
    lam: np.ndarray
    theta: np.ndarray
    gamma: np.ndarray


# -- lower bounds -----------------------------------------------------------

def compute_lower_bounds(Gamma, mode):
    """Per-layer, per-dimension forget-gate floors from the raw table"""
    if mode in ('monotone', 'only'):
        gamma = cumsum_shifted_dim0(softmax_dim0(Gamma))
    elif mode == 'decreasing':
        gamma = flip_rows(cumsum_shifted_dim0(softmax_dim0(Gamma)))
    elif mode == 'random':
        gamma = sigmoid(Gamma)
    elif mode == 'none':
        gamma = Tensor(np.zeros(Gamma.shape))
    else:
        raise ConfigError(f"unknown lower bound mode '{mode}'")
    return LowerBoundTable(gamma, mode)


def relief_gate(target, gamma):
    """The mu that realizes decay `target` above bound `gamma`"""
    return (target - gamma) / (1.0 - gamma)


# -- layers -----------------------------------------------------------------

def _stage(name, t):
    if not np.all(np.isfinite(t.values)):
        raise NumericError(name)
    return t


def hgru_forward(x, params, gamma_k, cfg, batch=1):
    """
    Token mixer. x is (batch*n, d) with rows ordered batch-major. Returns the
    mixed output and the LayerRecord of decay values used.
    """
    rows, d = x.shape
    gamma_rows = tile_rows(gamma_k, rows)
    if cfg.lower_bound_mode == 'only':
        lam = gamma_rows
    else:
        mu = sigmoid(affine(x, params.mu_weight, params.mu_bias))
        lam = gamma_rows + (1.0 - gamma_rows) * mu
    _stage('forget gate', lam)

    c_re = silu(affine(x, params.input_re_weight, params.input_re_bias))
    if cfg.use_complex:
        c_im = silu(affine(x, params.input_im_weight, params.input_im_bias))
        if cfg.theta_data_dependent:
            theta = affine(x, params.theta_weight, params.theta_bias)
        else:
            theta = params.theta
    else:
        c_im = Tensor(np.zeros((rows, d)))
        theta = Tensor(np.zeros(d))
    _stage('input projection', c_re)
    _stage('input projection', c_im)

    if cfg.tie_input_gate:
        weight = 1.0 - lam
    elif cfg.untied_input_weight == 'gate':
        weight = sigmoid(affine(x, params.input_gate_weight, params.input_gate_bias))
    else:
        weight = None
    b_re = c_re if weight is None else weight * c_re
    b_im = c_im if weight is None else weight * c_im

    h = _stage('recurrence', recurrence(lam, theta, b_re, b_im, batch, cfg.parallel_threshold))
    if not cfg.use_complex:
        h = take_cols(h, 0, d)
    if cfg.use_output_gate:
        gate = sigmoid(affine(x, params.out_gate_weight, params.out_gate_bias))
        h = _stage('output gate', gate * h)
    normed = _stage('output norm', layer_norm(h, params.out_norm_gain, params.out_norm_bias, cfg.norm_eps))
    out = _stage('output projection', affine(normed, params.out_proj_weight, params.out_proj_bias))

    n = rows // batch
    theta_record = theta.values.copy() if theta.values.ndim == 1 else theta.values.reshape(batch, n, d).copy()
    record = LayerRecord(lam.values.reshape(batch, n, d).copy(), theta_record, gamma_k.values.copy())
    return out, record


def glu_forward(x, params):
    """(silu(x W_u) * (x W_v)) W_down"""
    gate = silu(affine(x, params.up_gate_weight))
    value = affine(x, params.up_value_weight)
    return affine(gate * value, params.down_weight, params.down_bias)


def hgrn_block_forward(x, block, gamma_k, cfg, batch=1, records=None):
    """x <- x + HGRU(LN(x)); x <- x + GLU(LN(x))"""
    mixed, record = hgru_forward(
        layer_norm(x, block.token_norm_gain, block.token_norm_bias, cfg.norm_eps), block.hgru, gamma_k, cfg, batch
    )
    if records is not None:
        records.append(record)
    x = x + mixed
    x = x + glu_forward(layer_norm(x, block.channel_norm_gain, block.channel_norm_bias, cfg.norm_eps), block.glu)
    return _stage('block output', x)


def model_forward(tokens, params, cfg, records=None):
    """
    Logits for a (n,) or (batch, n) array of token ids, as a
    (batch*n, vocab) tensor. Causal: position t only reads positions <= t.
    """
    tokens = np.asarray(tokens)
    if tokens.ndim == 1:
        tokens = tokens[None, :]
    if tokens.ndim != 2 or tokens.shape[1] < 1:
        raise ContractError(f"tokens must be a non-empty (n,) or (batch, n) array, got shape {tokens.shape}")
    if tokens.min() < 0 or tokens.max() >= cfg.vocab_size:
        raise ContractError(f"token id outside [0, {cfg.vocab_size})")
    batch, n = tokens.shape
    if n > cfg.seq_len_max:
        raise ContractError(f"sequence length {n} exceeds model.seq_len_max={cfg.seq_len_max}")

    x = embedding(params.embedding, tokens.reshape(-1))
    table = compute_lower_bounds(params.lower_bounds, cfg.lower_bound_mode)
    for k, block in enumerate(params.blocks):
        x = hgrn_block_forward(x, block, table.row(k), cfg, batch, records)
    x = layer_norm(x, params.final_norm_gain, params.final_norm_bias, cfg.norm_eps)
    return _stage('logits', affine(x, params.head_weight, params.head_bias))


# -- initialization -----------------------------------------------------------

def rope_ladder(d):
    """theta_j = base^(-2*floor(j/2)/d): consecutive dimensions share a frequency"""
    j = np.arange(d)
    return ROPE_BASE ** (-2.0 * (j // 2) / d)


def init_params(cfg, seed):
    """Fresh parameters; identical for identical (cfg, seed)"""
    if cfg.width % 2:
        raise ConfigError(f"model.width must be even for the rotary initialization, got {cfg.width}")
    rng = np.random.default_rng(seed)
    d, e, w = cfg.width, cfg.expansion, cfg.mixer_width

    def param(values, name):
        return Tensor(values, requires_grad=True, name=name)

    def weight(fan_in, fan_out, name):
        bound = 1.0 / np.sqrt(fan_in)
        return param(rng.uniform(-bound, bound, size=(fan_in, fan_out)), name)

    def zeros(size, name):
        return param(np.zeros(size), name)

    def ones(size, name):
        return param(np.ones(size), name)

    params = ModelParams(
        embedding=param(rng.uniform(-1.0, 1.0, size=(cfg.vocab_size, d)), 'embedding'),
        lower_bounds=zeros((cfg.layers, d), 'lower_bounds'),
    )
    for k in range(cfg.layers):
        p = f'layers.{k}.'
        hgru = HGRULayerParams()
        if cfg.lower_bound_mode != 'only':
            hgru.mu_weight = weight(d, d, p + 'hgru.mu_weight')
            hgru.mu_bias = zeros(d, p + 'hgru.mu_bias')
        hgru.input_re_weight = weight(d, d, p + 'hgru.input_re_weight')
        hgru.input_re_bias = zeros(d, p + 'hgru.input_re_bias')
        if cfg.use_complex:
            hgru.input_im_weight = weight(d, d, p + 'hgru.input_im_weight')
            hgru.input_im_bias = zeros(d, p + 'hgru.input_im_bias')
            if cfg.theta_data_dependent:
                hgru.theta_weight = weight(d, d, p + 'hgru.theta_weight')
                hgru.theta_bias = param(rope_ladder(d), p + 'hgru.theta_bias')
            else:
                hgru.theta = param(rope_ladder(d), p + 'hgru.theta')
        if not cfg.tie_input_gate and cfg.untied_input_weight == 'gate':
            hgru.input_gate_weight = weight(d, d, p + 'hgru.input_gate_weight')
            hgru.input_gate_bias = zeros(d, p + 'hgru.input_gate_bias')
        if cfg.use_output_gate:
            hgru.out_gate_weight = weight(d, w, p + 'hgru.out_gate_weight')
            hgru.out_gate_bias = zeros(w, p + 'hgru.out_gate_bias')
        hgru.out_norm_gain = ones(w, p + 'hgru.out_norm_gain')
        hgru.out_norm_bias = zeros(w, p + 'hgru.out_norm_bias')
        hgru.out_proj_weight = weight(w, d, p + 'hgru.out_proj_weight')
        hgru.out_proj_bias = zeros(d, p + 'hgru.out_proj_bias')

        glu = GLUParams(
            up_gate_weight=weight(d, e, p + 'glu.up_gate_weight'),
            up_value_weight=weight(d, e, p + 'glu.up_value_weight'),
            down_weight=weight(e, d, p + 'glu.down_weight'),
            down_bias=zeros(d, p + 'glu.down_bias'),
        )
        params.blocks.append(BlockParams(
            token_norm_gain=ones(d, p + 'token_norm_gain'),
            token_norm_bias=zeros(d, p + 'token_norm_bias'),
            hgru=hgru,
            channel_norm_gain=ones(d, p + 'channel_norm_gain'),
            channel_norm_bias=zeros(d, p + 'channel_norm_bias'),
            glu=glu,
        ))
    params.final_norm_gain = ones(d, 'final_norm_gain')
    params.final_norm_bias = zeros(d, 'final_norm_bias')
    params.head_weight = weight(d, cfg.vocab_size, 'head_weight')
    params.head_bias = zeros(cfg.vocab_size, 'head_bias')
    logger.debug(f"Initialized {len(params.named())} parameter tensors with seed {seed}")
    return params


class HGRN:
    """A configuration bound to its parameters"""

    def __init__(self, cfg, params):
        self.cfg = cfg
        self.params = params

    @classmethod
    def initialize(cls, cfg, seed):
        return cls(cfg, init_params(cfg, seed))

    def parameters(self):
        return self.params.named()

    def num_parameters(self):
        return sum(t.size for t in self.parameters().values())

    def forward(self, tokens, records=None):
        return model_forward(tokens, self.params, self.cfg, records)

    def lower_bound_table(self):
        return compute_lower_bounds(self.params.lower_bounds, self.cfg.lower_bound_mode).values.copy()

    def zero_grad(self):
        for t in self.parameters().values():
            t.zero_grad()
