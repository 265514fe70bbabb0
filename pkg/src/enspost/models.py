"""Transformer, Direct and PPNN post-processing networks.

All variants share a three-layer 5x5 convolutional embedding applied to each
member separately.  They differ in what sits between the embedding and the
1x1 output projection:

* ``transformer``: ``n`` ensemble attention blocks (members interact);
* ``direct``: ``n`` residual blocks per member (members never interact);
* ``ppnn``: member-mean embedding plus surface-temperature mean and std,
  ``n`` residual blocks, and a Gaussian (mu, sigma) head.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import __version__
from . import autodiff as ad
from .attention import AttentionModuleParams, module_forward
from .autodiff import Param
from .data import SURFACE, VARIABLES, read_container, write_container
from .errors import CheckpointError, ConfigError, EnsembleSizeError

VARIANTS = ("transformer", "direct", "ppnn")
_DTYPES = {"float32": np.float32, "float64": np.float64}


@dataclass
class ModelConfig:
    variant: str = "transformer"
    n_layers: int = 1
    channels: int = 64
    heads: int = 64
    input_variables: int = len(VARIABLES)
    h: int = 32
    w: int = 64
    ddof: int = 1
    sigma_floor: float = 1e-6
    ln_eps: float = 1e-5
    dtype: str = "float32"
    seed: int = 0

    def validate(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.n_layers < 0:
            raise ConfigError("n_layers must be >= 0")
        if self.channels < 1 or self.heads < 1:
            raise ConfigError("channels and heads must be >= 1")
        if self.input_variables != len(VARIABLES):
            raise ConfigError(f"input_variables must be {len(VARIABLES)}")
        if self.h < 1 or self.w < 1:
            raise ConfigError("grid size must be positive")
        if self.ddof not in (0, 1):
            raise ConfigError("ddof must be 0 or 1")
        if self.sigma_floor <= 0:
            raise ConfigError("sigma_floor must be positive")
        if self.dtype not in _DTYPES:
            raise ConfigError(f"dtype must be one of {sorted(_DTYPES)}")
        return self

    @property
    def np_dtype(self):
        return _DTYPES[self.dtype]

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, doc):
        unknown = set(doc) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**doc).validate()


@dataclass
class ResidualBlockParams:
    W1: Param
    b1: Param
    W2: Param
    b2: Param
    scale: Param

    def parameters(self):
        return [self.W1, self.b1, self.W2, self.b2, self.scale]

    @classmethod
    def init(cls, channels, n_layers, rng, prefix, dtype):
        bound = np.sqrt(1.0 / channels) * n_layers ** -0.5
        return cls(
            W1=Param(f"{prefix}.W1", rng.uniform(-bound, bound, (channels, channels)).astype(dtype)),
            b1=Param(f"{prefix}.b1", np.zeros(channels, dtype)),
            W2=Param(f"{prefix}.W2", np.zeros((channels, channels), dtype)),
            b2=Param(f"{prefix}.b2", np.zeros(channels, dtype)),
            scale=Param(f"{prefix}.scale", np.ones(1, dtype)),
        )


@dataclass
class ModelParams:
    config: ModelConfig
    embedding: list                       # [(kernel, bias)] x 3
    blocks: list                          # AttentionModuleParams | ResidualBlockParams
    output: tuple                         # (W, b)
    extra: dict = field(default_factory=dict)

    def parameters(self):
        ps = [p for pair in self.embedding for p in pair]
        for blk in self.blocks:
            ps.extend(blk.parameters())
        ps.extend(self.output)
        return ps

    def named_parameters(self):
        return {p.name: p for p in self.parameters()}

    def state_dict(self):
        return {p.name: p.data.copy() for p in self.parameters()}

    def load_state_dict(self, state):
        for name, p in self.named_parameters().items():
            p.assign(state[name])

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None


def _bias(x, b):
    return ad.add(x, ad.reshape(b, (b.shape[0], 1, 1)))


def _residual(x, blk):
    hidden = ad.relu(_bias(ad.channel_project(x, blk.W1), blk.b1))
    branch = _bias(ad.channel_project(hidden, blk.W2), blk.b2)
    return ad.relu(ad.add(x, ad.mul(branch, blk.scale)))


def init_params(config, seed=None):
    """Fresh parameters; the seed defaults to ``config.seed``."""
    config.validate()
    rng = np.random.default_rng(config.seed if seed is None else seed)
    dt = config.np_dtype
    c = config.channels
    embedding = []
    c_in = config.input_variables
    for i in range(3):
        bound = np.sqrt(1.0 / (25 * c_in))
        kernel = Param(f"embed{i}.kernel", rng.uniform(-bound, bound, (c, c_in, 5, 5)).astype(dt))
        embedding.append((kernel, Param(f"embed{i}.bias", np.zeros(c, dt))))
        c_in = c
    blocks = []
    width = c + 2 if config.variant == "ppnn" else c
    for i in range(config.n_layers):
        if config.variant == "transformer":
            blocks.append(AttentionModuleParams.init(c, config.heads, rng, f"block{i}", dt))
        else:
            blocks.append(ResidualBlockParams.init(width, config.n_layers, rng, f"block{i}", dt))
    n_out = 2 if config.variant == "ppnn" else 1
    bound = np.sqrt(1.0 / width)
    output = (Param("output.W", rng.uniform(-bound, bound, (width, n_out)).astype(dt)),
              Param("output.b", np.zeros(n_out, dt)))
    return ModelParams(config, embedding, blocks, output)


def parameter_count(config):
    """Closed-form number of scalar parameters for a configuration."""
    c, cv, m = config.channels, config.input_variables, config.heads
    n = config.n_layers
    total = (cv * c * 25 + c) + 2 * (c * c * 25 + c)
    if config.variant == "transformer":
        total += n * (3 * c * m + m * c + 2 * c) + (c + 1)
    elif config.variant == "direct":
        total += n * (2 * c * c + 2 * c + 1) + (c + 1)
    else:
        width = c + 2
        total += n * (2 * width * width + 2 * width + 1) + 2 * (width + 1)
    return total


def _as_input(params, inputs):
    x = ad.as_tensor(inputs, params.config.np_dtype)
    if x.dtype != params.config.np_dtype:
        x = ad.Tensor(x.data.astype(params.config.np_dtype))
    if x.ndim < 4 or x.shape[-3] != params.config.input_variables:
        raise ConfigError(f"inputs must be (..., k, {params.config.input_variables}, h, w), got {x.shape}")
    return x


def embed(inputs, params):
    """Three 5x5 convolution + relu stages, applied per member."""
    x = _as_input(params, inputs)
    for kernel, bias in params.embedding:
        x = ad.relu(ad.conv2d_5x5(x, kernel, bias))
    return x


def _project_out(x, params):
    W, b = params.output
    return _bias(ad.channel_project(x, W), b)


def forward_transformer(inputs, params, diagnostics=False):
    """Returns ``(members (..., k, 1, h, w), [AttentionDiagnostics per layer])``."""
    z = embed(inputs, params)
    diags = []
    for blk in params.blocks:
        z, d = module_forward(z, blk, diagnostics, params.config.ln_eps)
        diags.append(d)
    return _project_out(z, params), diags


def forward_direct(inputs, params):
    z = embed(inputs, params)
    for blk in params.blocks:
        z = _residual(z, blk)
    return _project_out(z, params)


def forward_ppnn(inputs, params):
    """Returns ``(mu, sigma)``, each ``(..., h, w)``."""
    x = _as_input(params, inputs)
    if x.shape[-4] < 2:
        raise EnsembleSizeError("PPNN needs at least two members for the ensemble std")
    cfg = params.config
    z = ad.mean(embed(x, params), axis=-4)
    t2m = ad.take(x, SURFACE, axis=-3)
    t_mean = ad.mean(t2m, axis=-3, keepdims=True)
    t_std = ad.member_std(t2m, axis=-3, ddof=cfg.ddof, floor=0.0, keepdims=True)
    z = ad.concat_channels([z, t_mean, t_std])
    for blk in params.blocks:
        z = _residual(z, blk)
    out = _project_out(z, params)
    mu = ad.take(out, 0, axis=-3)
    sigma = ad.add(ad.softplus(ad.take(out, 1, axis=-3)), cfg.sigma_floor)
    return mu, sigma


def forward(params, inputs, diagnostics=False):
    """Variant dispatch: members tensor for transformer/direct, (mu, sigma) for ppnn."""
    v = params.config.variant
    if v == "transformer":
        members, diags = forward_transformer(inputs, params, diagnostics)
        return (members, diags) if diagnostics else members
    if v == "direct":
        return forward_direct(inputs, params)
    return forward_ppnn(inputs, params)


# -- checkpoints -------------------------------------------------------------

CHECKPOINT_KIND = "enspost-params"


def save_params(params, path, extra=None):
    doc = {"kind": CHECKPOINT_KIND, "format_version": 1, "tool_version": __version__,
           "config": params.config.to_dict(), "extra": extra or params.extra}
    write_container(path, params.state_dict(), doc)


def load_params(path, expected=None):
    """Load a checkpoint; ``expected`` (a ModelConfig or dict of fields) is checked first."""
    tensors, doc = read_container(path)
    if doc.get("kind") != CHECKPOINT_KIND or doc.get("format_version") != 1:
        raise CheckpointError(f"{path}: not a version-1 parameter checkpoint")
    config = ModelConfig.from_dict(doc["config"])
    if expected is not None:
        exp = expected.to_dict() if isinstance(expected, ModelConfig) else dict(expected)
        bad = sorted(k for k, v in exp.items() if doc["config"].get(k) != v)
        if bad:
            raise CheckpointError(f"{path}: checkpoint config differs in field(s) {bad}")
    params = init_params(config)
    named = params.named_parameters()
    missing = sorted(set(named) - set(tensors))
    unexpected = sorted(set(tensors) - set(named))
    wrong = sorted(n for n in set(named) & set(tensors) if tensors[n].shape != named[n].shape)
    if missing or unexpected or wrong:
        raise CheckpointError(f"{path}: missing {missing}, unexpected {unexpected}, wrong shape {wrong}")
    for name, p in named.items():
        p.data = tensors[name].astype(config.np_dtype, copy=True)
    params.extra = doc.get("extra", {})
    return params
