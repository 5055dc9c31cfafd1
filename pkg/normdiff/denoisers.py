"""
Noise-prediction backbones.

``FilmMlpDenoiser``
    Fully connected network over ``concat(y_t, t/T)``; each hidden layer is
    ``PReLU(FiLM_k(W_k h + b_k))`` with per-layer ``(gamma, beta)`` produced
    from the covariates by a small MLP.

``SaintDenoiser``
    Tabular transformer. Every IDP becomes a feature token, blocks alternate
    column attention (across the D tokens of a row) and row attention (across
    per-row summaries). Row attention runs in intersample mode only during
    training; evaluation always uses degenerate mode, so an output row depends
    only on its own inputs.
"""

import math
from typing import Dict, List, Mapping, Optional, Type

import numpy as np
from pydantic import BaseModel, Field, model_validator

from normdiff import ndmath as nd
from normdiff.diffusion import Denoiser, Phase, RowMode
from normdiff.errors import ContractError
from normdiff.ndmath import ArrayLike, Node, Tensor
from normdiff.utils import normdiff_logger

ROW_MODES = ("intersample", "degenerate")
BN_MOMENTUM = 0.1
BN_EPS = 1e-5


class FilmMlpConfig(BaseModel):
    """Hyperparameters of the FiLM-conditioned MLP."""

    hidden_widths: List[int] = Field(default_factory=lambda: [256, 256, 256])
    dropout_rate: float = Field(default=0.1, ge=0.0, lt=1.0)
    use_batchnorm: bool = False
    covariate_mlp_widths: List[int] = Field(default_factory=lambda: [64])
    prelu_init: float = 0.25

    @model_validator(mode='after')
    def validate_widths(self) -> 'FilmMlpConfig':
        if not self.hidden_widths:
            raise ValueError("hidden_widths needs at least one layer")
        if any(w < 1 for w in self.hidden_widths + self.covariate_mlp_widths):
            raise ValueError("All widths must be positive")
        return self


class SaintConfig(BaseModel):
    """Hyperparameters of the SAINT-style transformer."""

    d_model: int = Field(default=64, ge=1)
    n_heads: int = Field(default=4, ge=1)
    depth: int = Field(default=3, ge=0)
    ff_width: int = Field(default=128, ge=1)
    dropout_rate: float = Field(default=0.1, ge=0.0, lt=1.0)
    intersample_prob: float = Field(default=0.5, ge=0.0, le=1.0)
    prelu_init: float = 0.25

    @model_validator(mode='after')
    def validate_heads(self) -> 'SaintConfig':
        if self.d_model % self.n_heads != 0:
            raise ValueError(f"d_model {self.d_model} is not divisible by n_heads {self.n_heads}")
        return self


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int, gain: float = 1.0) -> Tensor:
    scale = gain * math.sqrt(2.0 / (fan_in + fan_out))
    return rng.normal(0.0, scale, size=(fan_in, fan_out))


def film(h: ArrayLike, gamma: ArrayLike, beta: ArrayLike) -> Node:
    """Feature-wise linear modulation ``gamma * h + beta``."""
    return nd.add(nd.mul(gamma, h), beta)


def linear(x: ArrayLike, weight: Node, bias: Optional[Node] = None) -> Node:
    out = nd.matmul(x, weight)
    return out if bias is None else nd.add(out, bias)


class FilmMlpDenoiser(Denoiser):
    """
    FiLM-conditioned MLP.

    Parameter layout (in flat-vector order): covariate MLP, then for every
    hidden layer its weight, bias, optional batch-norm affine, FiLM heads and
    PReLU slopes, then the output layer.
    """

    backbone = "mlp"

    def __init__(self, d: int, c: int, config: Optional[FilmMlpConfig] = None, seed: int = 0):
        config = config or FilmMlpConfig()
        super().__init__(d, c, config)
        rng = np.random.default_rng(seed)

        width_in = c
        for j, width in enumerate(config.covariate_mlp_widths):
            self.register(f"cov_w{j}", _glorot(rng, width_in, width))
            self.register(f"cov_b{j}", np.zeros(width))
            self.register(f"cov_alpha{j}", np.full(width, config.prelu_init))
            width_in = width
        cond_width = width_in

        fan_in = d + 1
        for k, width in enumerate(config.hidden_widths):
            self.register(f"w{k}", _glorot(rng, fan_in, width))
            self.register(f"b{k}", np.zeros(width))
            if config.use_batchnorm:
                self.register(f"bn_gain{k}", np.ones(width))
                self.register(f"bn_bias{k}", np.zeros(width))
                self.buffers[f"bn_mean{k}"] = np.zeros(width)
                self.buffers[f"bn_var{k}"] = np.ones(width)
            self.register(f"film_gamma_w{k}", _glorot(rng, cond_width, width, gain=0.1))
            self.register(f"film_gamma_b{k}", np.zeros(width))
            self.register(f"film_beta_w{k}", _glorot(rng, cond_width, width, gain=0.1))
            self.register(f"film_beta_b{k}", np.zeros(width))
            self.register(f"alpha{k}", np.full(width, config.prelu_init))
            fan_in = width
        self.register("out_w", _glorot(rng, fan_in, d))
        self.register("out_b", np.zeros(d))

    def condition(self, c: Tensor) -> Node:
        """Hidden representation of the covariates feeding the FiLM heads."""
        h: Node = nd.as_node(c)
        for j in range(len(self.config.covariate_mlp_widths)):
            p = self.params
            h = nd.prelu(linear(h, p[f"cov_w{j}"], p[f"cov_b{j}"]), p[f"cov_alpha{j}"])
        return h

    def film_params(self, cond: Node, k: int):
        p = self.params
        gamma = nd.add(linear(cond, p[f"film_gamma_w{k}"], p[f"film_gamma_b{k}"]), 1.0)
        beta = linear(cond, p[f"film_beta_w{k}"], p[f"film_beta_b{k}"])
        return gamma, beta

    def _batchnorm(self, h: Node, k: int, phase: Phase) -> Node:
        p = self.params
        if phase == "train":
            mu = nd.mean(h, axis=0, keepdims=True)
            centred = nd.sub(h, mu)
            var = nd.mean(nd.mul(centred, centred), axis=0, keepdims=True)
            normed = nd.mul(centred, nd.power(nd.add(var, BN_EPS), -0.5))
            self.buffers[f"bn_mean{k}"] = (
                (1 - BN_MOMENTUM) * self.buffers[f"bn_mean{k}"] + BN_MOMENTUM * mu.value[0]
            )
            self.buffers[f"bn_var{k}"] = (
                (1 - BN_MOMENTUM) * self.buffers[f"bn_var{k}"] + BN_MOMENTUM * var.value[0]
            )
        else:
            inv_std = 1.0 / np.sqrt(self.buffers[f"bn_var{k}"] + BN_EPS)
            normed = nd.mul(nd.sub(h, self.buffers[f"bn_mean{k}"]), inv_std)
        return nd.add(nd.mul(normed, p[f"bn_gain{k}"]), p[f"bn_bias{k}"])

    def forward(
        self,
        y_t: Tensor,
        t_norm: Tensor,
        c: Tensor,
        phase: Phase = "eval",
        rng: Optional[np.random.Generator] = None,
        row_mode: RowMode = None,
    ) -> Node:
        y_t, t_norm, c = np.asarray(y_t, float), np.asarray(t_norm, float), np.asarray(c, float)
        self._check_inputs(y_t, t_norm, c)
        cond = self.condition(c)
        h: Node = nd.as_node(np.concatenate([y_t, t_norm[:, None]], axis=1))
        for k in range(len(self.config.hidden_widths)):
            h = linear(h, self.params[f"w{k}"], self.params[f"b{k}"])
            if self.config.use_batchnorm:
                h = self._batchnorm(h, k, phase)
            gamma, beta = self.film_params(cond, k)
            h = nd.prelu(film(h, gamma, beta), self.params[f"alpha{k}"])
            if phase == "train":
                h = nd.dropout(h, self.dropout_mask(rng, h.shape, self.config.dropout_rate),
                               self.config.dropout_rate)
        return linear(h, self.params["out_w"], self.params["out_b"])


class FeatureTokenizer:
    """
    Maps each IDP value to a ``d_model`` token.

    ``token_d = y_d * w_d + b_d + e_d + proj(c) + proj(t/T)``; the token of
    feature d depends only on ``y_d``, the covariates, the step and column-d
    parameters.
    """

    def __init__(self, weight: Node, bias: Node, column_embedding: Node,
                 cov_weight: Node, cov_bias: Node, time_weight: Node, time_bias: Node):
        self.weight = weight
        self.bias = bias
        self.column_embedding = column_embedding
        self.cov_weight = cov_weight
        self.cov_bias = cov_bias
        self.time_weight = time_weight
        self.time_bias = time_bias

    @property
    def d_model(self) -> int:
        return self.weight.shape[1]

    def tokenize(self, y_t: Tensor, t_norm: Tensor, c: Tensor) -> Node:
        """Tokens of shape ``(B, D, d_model)``."""
        batch = y_t.shape[0]
        values = nd.as_node(y_t.reshape(batch, -1, 1))
        per_feature = nd.add(nd.add(nd.mul(values, self.weight), self.bias), self.column_embedding)
        cov = linear(c, self.cov_weight, self.cov_bias)
        step = linear(t_norm.reshape(batch, 1), self.time_weight, self.time_bias)
        shared = nd.reshape(nd.add(cov, step), (batch, 1, self.d_model))
        return nd.add(per_feature, shared)


def tokenize(y_t: Tensor, t_norm: Tensor, c: Tensor, tokenizer: FeatureTokenizer) -> Node:
    return tokenizer.tokenize(np.asarray(y_t, float), np.asarray(t_norm, float), np.asarray(c, float))


def _split_heads(x: Node, n_heads: int) -> Node:
    """``(..., L, d_model)`` to ``(..., H, L, d_head)``."""
    *lead, length, d_model = x.shape
    split = nd.reshape(x, tuple(lead) + (length, n_heads, d_model // n_heads))
    k = len(lead)
    axes = tuple(range(k)) + (k + 1, k, k + 2)
    return nd.transpose(split, axes)


def _merge_heads(x: Node) -> Node:
    """Inverse of :func:`_split_heads`."""
    *lead, n_heads, length, d_head = x.shape
    k = len(lead)
    axes = tuple(range(k)) + (k + 1, k, k + 2)
    return nd.reshape(nd.transpose(x, axes), tuple(lead) + (length, n_heads * d_head))


def _swap_last(x: Node) -> Node:
    axes = tuple(range(x.ndim - 2)) + (x.ndim - 1, x.ndim - 2)
    return nd.transpose(x, axes)


def _maybe_dropout(x: Node, rng: Optional[np.random.Generator], rate: float) -> Node:
    if rng is None or rate <= 0.0:
        return x
    return nd.dropout(x, Denoiser.dropout_mask(rng, x.shape, rate), rate)


def column_attention_block(
    tokens: Node,
    params: Mapping[str, Node],
    n_heads: int,
    rng: Optional[np.random.Generator] = None,
    dropout_rate: float = 0.0,
) -> Node:
    """
    Pre-norm multi-head self-attention over the D tokens of each row, then a
    PReLU feed-forward sublayer, both with residual connections.

    ``params`` keys: ``q, k, v, o, o_b, ff1, ff1_b, ff_alpha, ff2, ff2_b``.
    ``tokens`` is ``(B, D, d_model)``; rows never interact.
    """
    d_head = tokens.shape[-1] // n_heads
    h = nd.layernorm(tokens)
    q = _split_heads(nd.matmul(h, params["q"]), n_heads)
    k = _split_heads(nd.matmul(h, params["k"]), n_heads)
    v = _split_heads(nd.matmul(h, params["v"]), n_heads)
    scores = nd.mul(nd.matmul(q, _swap_last(k)), 1.0 / math.sqrt(d_head))
    attended = _merge_heads(nd.matmul(nd.softmax(scores), v))
    update = _maybe_dropout(linear(attended, params["o"], params["o_b"]), rng, dropout_rate)
    x = nd.add(tokens, update)

    f = nd.prelu(linear(nd.layernorm(x), params["ff1"], params["ff1_b"]), params["ff_alpha"])
    f = _maybe_dropout(f, rng, dropout_rate)
    return nd.add(x, linear(f, params["ff2"], params["ff2_b"]))


def row_attention_block(
    tokens: Node,
    params: Mapping[str, Node],
    n_heads: int,
    mode: str = "degenerate",
) -> Node:
    """
    Attention across rows through one summary token per row.

    The summary of row b is the plain mean of its D tokens. In
    ``intersample`` mode the summaries attend over the whole batch; in
    ``degenerate`` mode each summary attends only to itself. The resulting
    update is added to every token of its row.

    ``params`` keys: ``q, k, v, o, o_b``.
    """
    if mode not in ROW_MODES:
        raise ContractError(f"Unknown row attention mode '{mode}'")
    batch, _, d_model = tokens.shape
    d_head = d_model // n_heads
    summary = nd.mean(tokens, axis=1)

    # (B, d_model) -> (H, B, d_head)
    def heads(w: Node) -> Node:
        return nd.transpose(nd.reshape(nd.matmul(summary, w), (batch, n_heads, d_head)), (1, 0, 2))

    q, k, v = heads(params["q"]), heads(params["k"]), heads(params["v"])
    scale = 1.0 / math.sqrt(d_head)
    if mode == "intersample":
        weights = nd.softmax(nd.mul(nd.matmul(q, _swap_last(k)), scale))
        attended = nd.matmul(weights, v)
    else:
        weights = nd.softmax(nd.mul(nd.sum(nd.mul(q, k), axis=-1, keepdims=True), scale))
        attended = nd.mul(weights, v)
    merged = nd.reshape(nd.transpose(attended, (1, 0, 2)), (batch, d_model))
    update = linear(merged, params["o"], params["o_b"])
    return nd.add(tokens, nd.reshape(update, (batch, 1, d_model)))


class SaintDenoiser(Denoiser):
    """SAINT-style transformer with a per-feature linear output head."""

    backbone = "saint"

    def __init__(self, d: int, c: int, config: Optional[SaintConfig] = None, seed: int = 0):
        config = config or SaintConfig()
        super().__init__(d, c, config)
        rng = np.random.default_rng(seed)
        dm = config.d_model
        token_scale = 1.0 / math.sqrt(dm)

        self.tokenizer = FeatureTokenizer(
            weight=self.register("tok_w", rng.normal(0.0, token_scale, size=(d, dm))),
            bias=self.register("tok_b", np.zeros((d, dm))),
            column_embedding=self.register("col_embed", rng.normal(0.0, token_scale, size=(d, dm))),
            cov_weight=self.register("cov_proj_w", _glorot(rng, c, dm)),
            cov_bias=self.register("cov_proj_b", np.zeros(dm)),
            time_weight=self.register("time_proj_w", _glorot(rng, 1, dm)),
            time_bias=self.register("time_proj_b", np.zeros(dm)),
        )
        self.column_params: List[Dict[str, Node]] = []
        self.row_params: List[Dict[str, Node]] = []
        for layer in range(config.depth):
            col = {}
            for name in ("q", "k", "v", "o"):
                col[name] = self.register(f"col{layer}_{name}", _glorot(rng, dm, dm))
            col["o_b"] = self.register(f"col{layer}_o_b", np.zeros(dm))
            col["ff1"] = self.register(f"col{layer}_ff1", _glorot(rng, dm, config.ff_width))
            col["ff1_b"] = self.register(f"col{layer}_ff1_b", np.zeros(config.ff_width))
            col["ff_alpha"] = self.register(f"col{layer}_ff_alpha", np.full(config.ff_width, config.prelu_init))
            col["ff2"] = self.register(f"col{layer}_ff2", _glorot(rng, config.ff_width, dm))
            col["ff2_b"] = self.register(f"col{layer}_ff2_b", np.zeros(dm))
            self.column_params.append(col)

            row = {}
            for name in ("q", "k", "v", "o"):
                row[name] = self.register(f"row{layer}_{name}", _glorot(rng, dm, dm))
            row["o_b"] = self.register(f"row{layer}_o_b", np.zeros(dm))
            self.row_params.append(row)
        self.register("head_w", _glorot(rng, d, dm))
        self.register("head_b", np.zeros(d))

    def choose_row_mode(self, phase: Phase, rng: Optional[np.random.Generator], row_mode: RowMode) -> str:
        """Degenerate at evaluation; one Bernoulli(intersample_prob) draw per training step."""
        if phase != "train":
            return "degenerate"
        if row_mode is not None:
            if row_mode not in ROW_MODES:
                raise ContractError(f"Unknown row attention mode '{row_mode}'")
            return row_mode
        if rng is None:
            return "degenerate"
        return "intersample" if rng.random() < self.config.intersample_prob else "degenerate"

    def head(self, tokens: Node) -> Node:
        """Per-feature readout: ``eps_d = <token_d, head_w[d]> + head_b[d]``."""
        return nd.add(nd.sum(nd.mul(tokens, self.params["head_w"]), axis=-1), self.params["head_b"])

    def forward(
        self,
        y_t: Tensor,
        t_norm: Tensor,
        c: Tensor,
        phase: Phase = "eval",
        rng: Optional[np.random.Generator] = None,
        row_mode: RowMode = None,
    ) -> Node:
        y_t, t_norm, c = np.asarray(y_t, float), np.asarray(t_norm, float), np.asarray(c, float)
        self._check_inputs(y_t, t_norm, c)
        mode = self.choose_row_mode(phase, rng, row_mode)
        drop_rng = rng if phase == "train" else None
        x = self.tokenizer.tokenize(y_t, t_norm, c)
        for col, row in zip(self.column_params, self.row_params):
            x = column_attention_block(x, col, self.config.n_heads, drop_rng, self.config.dropout_rate)
            x = row_attention_block(x, row, self.config.n_heads, mode)
        return self.head(x)


BACKBONES: Dict[str, Type[Denoiser]] = {
    FilmMlpDenoiser.backbone: FilmMlpDenoiser,
    SaintDenoiser.backbone: SaintDenoiser,
}

BACKBONE_CONFIGS: Dict[str, Type[BaseModel]] = {
    FilmMlpDenoiser.backbone: FilmMlpConfig,
    SaintDenoiser.backbone: SaintConfig,
}


def build_denoiser(backbone: str, d: int, c: int, config: Optional[BaseModel] = None, seed: int = 0) -> Denoiser:
    """
    Instantiate a backbone by identifier.

    Raises:
        ContractError: For an unknown backbone or a config of the wrong type.
    """
    if backbone not in BACKBONES:
        raise ContractError(f"Unknown backbone '{backbone}', expected one of {sorted(BACKBONES)}")
    config_type = BACKBONE_CONFIGS[backbone]
    if config is None:
        config = config_type()
    elif isinstance(config, dict):
        config = config_type.model_validate(config)
    elif not isinstance(config, config_type):
        raise ContractError(f"Backbone '{backbone}' needs a {config_type.__name__}")
    denoiser = BACKBONES[backbone](d, c, config, seed=seed)
    normdiff_logger.info(
        f"Built denoiser | Backbone: {backbone} | D: {d} | C: {c} | Parameters: {denoiser.n_params}"
    )
    return denoiser
