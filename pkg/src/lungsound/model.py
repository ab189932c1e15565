"""Inception-residual classifier with spatio-temporal focusing and
multi-head attention pooling.

Data flow: Doub-Inc block -> Inc-Res block (128ch) -> Inc-Res block (256ch)
-> three global pooling maps -> per-map multi-head self-attention -> FC(512)
-> FC(n_classes) -> softmax. Every Avg/Max pool is 2x2 stride 2, so the
spatial dims halve at each of the three blocks.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import InvalidConfigError, InvalidInputError


@dataclass(frozen=True)
class ModelConfig:
    input_dims: tuple = (118, 502)  # post-crop (F, T)
    n_classes: int = 7
    doub_inc_channels: int = 128
    inc_res_channels: tuple = (128, 256)
    rn_lambda: float = 0.4
    attn_heads: int = 16
    attn_key_dim: int = 32
    fc_hidden: int = 512
    dropout: float = 0.2
    incft_kernels: tuple = ((3,), (3,))
    inct_kernels: tuple = ((5, 7), (7, 9))

    def __post_init__(self):
        if self.n_classes < 2:
            raise InvalidConfigError("need at least two classes")
        if self.rn_lambda < 0:
            raise InvalidConfigError("rn_lambda must be >= 0")
        if self.attn_heads * self.attn_key_dim <= 0:
            raise InvalidConfigError("attention dims must be positive")
        if len(self.inc_res_channels) != 2:
            raise InvalidConfigError("exactly two Inc-Res blocks are built")

    def block_dims(self):
        """(channels, F, T) entering each stage, ending at the pooling block."""
        f, t = self.input_dims
        dims = [(1, f, t)]
        for c in (self.doub_inc_channels, *self.inc_res_channels):
            f, t = f // 2, t // 2
            dims.append((c, f, t))
        return dims

    def to_dict(self):
        return {
            "input_dims": list(self.input_dims),
            "n_classes": self.n_classes,
            "doub_inc_channels": self.doub_inc_channels,
            "inc_res_channels": list(self.inc_res_channels),
            "rn_lambda": self.rn_lambda,
            "attn_heads": self.attn_heads,
            "attn_key_dim": self.attn_key_dim,
            "fc_hidden": self.fc_hidden,
            "dropout": self.dropout,
            "incft_kernels": [list(k) for k in self.incft_kernels],
            "inct_kernels": [list(k) for k in self.inct_kernels],
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            input_dims=tuple(d["input_dims"]),
            n_classes=int(d["n_classes"]),
            doub_inc_channels=int(d["doub_inc_channels"]),
            inc_res_channels=tuple(d["inc_res_channels"]),
            rn_lambda=float(d["rn_lambda"]),
            attn_heads=int(d["attn_heads"]),
            attn_key_dim=int(d["attn_key_dim"]),
            fc_hidden=int(d["fc_hidden"]),
            dropout=float(d["dropout"]),
            incft_kernels=tuple(tuple(k) for k in d["incft_kernels"]),
            inct_kernels=tuple(tuple(k) for k in d["inct_kernels"]),
        )


def glorot_uniform(rng, shape, fan_in, fan_out, dtype):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


class Module:
    """Parameter container; children and Tensors found via __dict__ order."""

    def named_parameters(self, prefix=""):
        for name, value in self.__dict__.items():
            path = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield path, value
            elif isinstance(value, Module):
                yield from value.named_parameters(path + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Tensor) and item.requires_grad:
                        yield f"{path}.{i}", item
                    elif isinstance(item, Module):
                        yield from item.named_parameters(f"{path}.{i}.")

    def named_buffers(self, prefix=""):
        for name, value in self.__dict__.items():
            path = f"{prefix}{name}"
            if isinstance(value, np.ndarray):
                yield path, value
            elif isinstance(value, Module):
                yield from value.named_buffers(path + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_buffers(f"{path}.{i}.")


class Conv2d(Module):
    def __init__(self, c_in, c_out, kh, kw, rng, dtype, padding="same"):
        fan_in = c_in * kh * kw
        fan_out = c_out * kh * kw
        self.weight = Tensor(
            glorot_uniform(rng, (c_out, c_in, kh, kw), fan_in, fan_out, dtype),
            requires_grad=True,
        )
        self.bias = Tensor(np.zeros(c_out, dtype=dtype), requires_grad=True)
        self.padding = padding

    def __call__(self, x):
        return ad.conv2d(x, self.weight, self.bias, self.padding)


class Dense(Module):
    def __init__(self, d_in, d_out, rng, dtype):
        self.weight = Tensor(
            glorot_uniform(rng, (d_in, d_out), d_in, d_out, dtype),
            requires_grad=True,
        )
        self.bias = Tensor(np.zeros(d_out, dtype=dtype), requires_grad=True)

    def __call__(self, x):
        return ad.dense(x, self.weight, self.bias)


class BatchNorm2d(Module):
    def __init__(self, channels, dtype, momentum=0.1):
        self.gamma = Tensor(np.ones(channels, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)
        self.running_mean = np.zeros(channels, dtype=np.float64)
        self.running_var = np.ones(channels, dtype=np.float64)
        self.momentum = momentum

    def __call__(self, x, training):
        return ad.batch_norm(
            x, self.gamma, self.beta, self.running_mean, self.running_var,
            self.momentum, training,
        )


class MultiHeadAttention(Module):
    """Self-attention over N×S×D with per-head D×K projections and a final
    (H·K)×D output projection."""

    def __init__(self, d_model, heads, key_dim, rng, dtype):
        def proj():
            return [
                Tensor(
                    glorot_uniform(rng, (d_model, key_dim), d_model, key_dim, dtype),
                    requires_grad=True,
                )
                for _ in range(heads)
            ]

        self.wq = proj()
        self.wk = proj()
        self.wv = proj()
        self.wo = Tensor(
            glorot_uniform(
                rng, (heads * key_dim, d_model), heads * key_dim, d_model, dtype
            ),
            requires_grad=True,
        )

    def __call__(self, x):
        return ad.multi_head_attention(x, self.wq, self.wk, self.wv, self.wo)


class IncBranches(Module):
    """Parallel same-padding convolutions with equal widths, summed."""

    def __init__(self, c_in, c_out, kernels, rng, dtype):
        self.branches = [
            Conv2d(c_in, c_out, kh, kw, rng, dtype) for kh, kw in kernels
        ]

    def __call__(self, x):
        out = self.branches[0](x)
        for branch in self.branches[1:]:
            out = out + branch(x)
        return out


def inc01(c_in, c_out, rng, dtype):
    """Inception block mixing [3x3], [1x1] and [4x1] kernels."""
    if c_out <= 0:
        raise InvalidConfigError("channels must be positive")
    return IncBranches(c_in, c_out, [(3, 3), (1, 1), (4, 1)], rng, dtype)


def residual_norm(x, lam):
    """lam·x plus per-(sample, channel, frequency) normalization over time."""
    return x * lam + ad.instance_norm_freq(x)


class DoubIncBlock(Module):
    def __init__(self, channels, rn_lambda, drop, rng, dtype):
        self.inc_a = inc01(1, channels, rng, dtype)
        self.bn_a = BatchNorm2d(channels, dtype)
        self.inc_b = inc01(channels, channels, rng, dtype)
        self.bn_b = BatchNorm2d(channels, dtype)
        self.rn_lambda = rn_lambda
        self.drop = drop

    def __call__(self, x, training, rng):
        x = ad.relu(self.bn_a(self.inc_a(x), training))
        x = ad.relu(self.bn_b(self.inc_b(x), training))
        x = ad.pool2d(x, "avg", (2, 2))
        x = ad.dropout(x, self.drop, training, rng)
        return residual_norm(x, self.rn_lambda)


class IncResBlock(Module):
    """Two focusing branches plus a projected residual shortcut.

    Branches: [IncFT(KxK) -> ReLU -> AP(2x2) -> RN] and [IncT(1xK) -> ReLU
    -> AP(2x2) -> RN], summed; shortcut: 1x1 Conv -> BN -> MP(2x2).
    """

    def __init__(self, c_in, c_out, ft_kernels, t_kernels, rn_lambda, drop,
                 rng, dtype):
        self.inc_ft = IncBranches(c_in, c_out, [(k, k) for k in ft_kernels],
                                  rng, dtype)
        self.inc_t = IncBranches(c_in, c_out, [(1, k) for k in t_kernels],
                                 rng, dtype)
        self.shortcut = Conv2d(c_in, c_out, 1, 1, rng, dtype)
        self.shortcut_bn = BatchNorm2d(c_out, dtype)
        self.rn_lambda = rn_lambda
        self.drop = drop

    def __call__(self, x, training, rng):
        b1 = residual_norm(
            ad.pool2d(ad.relu(self.inc_ft(x)), "avg", (2, 2)), self.rn_lambda
        )
        b2 = residual_norm(
            ad.pool2d(ad.relu(self.inc_t(x)), "avg", (2, 2)), self.rn_lambda
        )
        res = ad.pool2d(self.shortcut_bn(self.shortcut(x), training),
                        "max", (2, 2))
        return ad.dropout(b1 + b2 + res, self.drop, training, rng)


def pooling_maps(x):
    """Three global views of an N×C×F×T tensor:
    mean over channels (N×F×T), max over time (N×F×C), mean over frequency
    (N×T×C)."""
    m1 = ad.global_avg_over(x, "channel")
    m2 = ad.transpose(ad.global_max_over(x, "time"), (0, 2, 1))
    m3 = ad.transpose(ad.global_avg_over(x, "frequency"), (0, 2, 1))
    return m1, m2, m3


class AttentionHead(Module):
    """Attend each pooled map over its leading axis, mean-pool, concatenate,
    and classify."""

    def __init__(self, t_feat, c_feat, config, rng, dtype):
        heads, key_dim = config.attn_heads, config.attn_key_dim
        self.attn_ft = MultiHeadAttention(t_feat, heads, key_dim, rng, dtype)
        self.attn_fc = MultiHeadAttention(c_feat, heads, key_dim, rng, dtype)
        self.attn_tc = MultiHeadAttention(c_feat, heads, key_dim, rng, dtype)
        self.fc1 = Dense(t_feat + 2 * c_feat, config.fc_hidden, rng, dtype)
        self.fc2 = Dense(config.fc_hidden, config.n_classes, rng, dtype)
        self.drop = config.dropout

    def __call__(self, maps, training, rng):
        m1, m2, m3 = maps
        embeds = [
            ad.tmean(self.attn_ft(m1), axis=1),
            ad.tmean(self.attn_fc(m2), axis=1),
            ad.tmean(self.attn_tc(m3), axis=1),
        ]
        h = ad.relu(self.fc1(ad.concat(embeds, axis=-1)))
        h = ad.dropout(h, self.drop, training, rng)
        return ad.softmax(self.fc2(h), axis=-1)


class RespiratoryClassifier(Module):
    def __init__(self, config, seed=0, dtype=np.float32):
        rng = np.random.default_rng(seed)
        self.config = config
        self.dtype = dtype
        c = config.doub_inc_channels
        c1, c2 = config.inc_res_channels
        self.doub_inc = DoubIncBlock(c, config.rn_lambda, config.dropout,
                                     rng, dtype)
        self.inc_res1 = IncResBlock(
            c, c1, config.incft_kernels[0], config.inct_kernels[0],
            config.rn_lambda, config.dropout, rng, dtype,
        )
        self.inc_res2 = IncResBlock(
            c1, c2, config.incft_kernels[1], config.inct_kernels[1],
            config.rn_lambda, config.dropout, rng, dtype,
        )
        _, f_out, t_out = config.block_dims()[-1]
        if f_out < 1 or t_out < 1:
            raise InvalidConfigError("input dims collapse before pooling")
        self.head = AttentionHead(t_out, c2, config, rng, dtype)

    def forward(self, batch, training=False, rng=None):
        """batch: N×1×F×T array or Tensor -> N×n_classes probabilities."""
        if isinstance(batch, Tensor):
            x = batch
        else:
            x = Tensor(np.asarray(batch, dtype=self.dtype))
        expected = self.config.input_dims
        if x.ndim != 4 or x.shape[1] != 1 or x.shape[2:] != tuple(expected):
            raise InvalidInputError(
                f"model expects Nx1x{expected[0]}x{expected[1]}, got {x.shape}"
            )
        dims = self.config.block_dims()
        x = self.doub_inc(x, training, rng)
        _check_dims("doub_inc", x, dims[1])
        x = self.inc_res1(x, training, rng)
        _check_dims("inc_res1", x, dims[2])
        x = self.inc_res2(x, training, rng)
        _check_dims("inc_res2", x, dims[3])
        return self.head(pooling_maps(x), training, rng)

    __call__ = forward

    def parameters(self):
        return dict(self.named_parameters())

    def n_parameters(self):
        return sum(int(np.prod(p.shape)) for p in self.parameters().values())

    def zero_grad(self):
        for p in self.parameters().values():
            p.zero_grad()


def _check_dims(block, x, expected):
    c, f, t = expected
    if x.shape[1:] != (c, f, t):
        raise InvalidInputError(
            f"{block}: expected {(c, f, t)} features, got {x.shape[1:]}"
        )
