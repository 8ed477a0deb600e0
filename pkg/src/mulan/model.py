"""Online/target encoder pair with a per-view-type predictor bank.

The backbone is a 4-block conv net (3x3 conv, stride 2 -> batchnorm -> relu)
ending in global mean pooling, so the same parameters accept any spatial size
down to 8 px.  The projector and predictors are small MLPs whose layout
depends on the objective family:

  byol     2-layer projector and predictor, batchnorm+relu between layers
  mocov3   like byol plus batchnorm on the outputs of both heads
  simsiam  3-layer projector with output batchnorm; 2-layer bottleneck
           predictor (hidden = output / 4); target is a stop-gradient alias
           of the online encoder instead of an EMA copy

Target parameters and running statistics are updated only by ``ema_update``;
target forwards never touch batchnorm running statistics.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .augment import ViewType
from .errors import ConfigError, NonFiniteError, ShapeError
from .rng import DOMAIN_MODEL, stream
from .tensor import BatchNormState, Tensor, no_grad

METHODS = ("byol", "simsiam", "mocov3")


@dataclass
class HeadConfig:
    """Architecture of encoder heads and predictors."""
    method: str = "byol"
    backbone_channels: tuple = (16, 32, 64, 128)
    proj_hidden: int = 512
    proj_out: int = 64
    proj_depth: int = 2
    proj_out_bn: bool = False
    pred_hidden: int = 512
    pred_depth: int = 2
    pred_out_bn: bool = False
    bn_eps: float = 1e-5
    bn_momentum: float = 0.1
    shared_predictor: bool = False

    @classmethod
    def for_method(cls, method: str, **overrides) -> "HeadConfig":
        if method not in METHODS:
            raise ConfigError(f"unknown method {method!r}, expected one of {METHODS}")
        cfg = cls(method=method)
        if method == "mocov3":
            cfg.proj_out_bn = True
            cfg.pred_out_bn = True
        elif method == "simsiam":
            cfg.proj_depth = 3
            cfg.proj_out_bn = True
            cfg.pred_hidden = 0  # resolved to proj_out // 4 below
        for key, value in overrides.items():
            if not hasattr(cfg, key):
                raise ConfigError(f"unknown HeadConfig field {key!r}")
            setattr(cfg, key, value)
        if cfg.method == "simsiam" and cfg.pred_hidden == 0:
            cfg.pred_hidden = max(cfg.proj_out // 4, 4)
        return cfg


def he_uniform(rng: np.random.Generator, shape: tuple, fan_in: int, dtype) -> np.ndarray:
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Linear:
    def __init__(self, rng, in_dim: int, out_dim: int, dtype=np.float32):
        self.W = Tensor(he_uniform(rng, (in_dim, out_dim), in_dim, dtype),
                        requires_grad=True)
        self.b = Tensor(np.zeros(out_dim, dtype=dtype), requires_grad=True)

    def forward(self, x):
        return T.add(T.matmul(x, self.W), self.b)

    def named_params(self, prefix):
        return [(f"{prefix}.W", self.W), (f"{prefix}.b", self.b)]

    def named_states(self, prefix):
        return []


class Conv3x3:
    def __init__(self, rng, in_ch: int, out_ch: int, stride: int, dtype=np.float32):
        fan_in = in_ch * 9
        self.kernel = Tensor(he_uniform(rng, (out_ch, in_ch, 3, 3), fan_in, dtype),
                             requires_grad=True)
        self.stride = stride

    def forward(self, x):
        return T.conv2d(x, self.kernel, stride=self.stride)

    def named_params(self, prefix):
        return [(f"{prefix}.kernel", self.kernel)]

    def named_states(self, prefix):
        return []


class BatchNorm:
    def __init__(self, num_features: int, eps: float = 1e-5, momentum: float = 0.1,
                 dtype=np.float32):
        self.gamma = Tensor(np.ones(num_features, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(num_features, dtype=dtype), requires_grad=True)
        self.state = BatchNormState(num_features, momentum, dtype)
        self.eps = eps

    def forward(self, x, mode, update_stats=True):
        return T.batchnorm(x, self.gamma, self.beta, self.state, mode=mode,
                           eps=self.eps, update_stats=update_stats)

    def named_params(self, prefix):
        return [(f"{prefix}.gamma", self.gamma), (f"{prefix}.beta", self.beta)]

    def named_states(self, prefix):
        return [(f"{prefix}.running_mean", self.state, "running_mean"),
                (f"{prefix}.running_var", self.state, "running_var")]


class ConvBlock:
    """conv3x3 (stride 2) -> batchnorm -> relu."""

    def __init__(self, rng, in_ch, out_ch, cfg: HeadConfig, dtype):
        self.conv = Conv3x3(rng, in_ch, out_ch, stride=2, dtype=dtype)
        self.bn = BatchNorm(out_ch, cfg.bn_eps, cfg.bn_momentum, dtype)

    def forward(self, x, mode, update_stats=True):
        return T.relu(self.bn.forward(self.conv.forward(x), mode, update_stats))

    def named_params(self, prefix):
        return self.conv.named_params(f"{prefix}.conv") + self.bn.named_params(f"{prefix}.bn")

    def named_states(self, prefix):
        return self.bn.named_states(f"{prefix}.bn")


class Backbone:
    def __init__(self, rng, cfg: HeadConfig, dtype):
        chans = (3,) + tuple(cfg.backbone_channels)
        self.blocks = [ConvBlock(rng, chans[i], chans[i + 1], cfg, dtype)
                       for i in range(len(cfg.backbone_channels))]
        self.out_dim = cfg.backbone_channels[-1]

    def forward(self, x, mode, update_stats=True):
        for block in self.blocks:
            x = block.forward(x, mode, update_stats)
        return T.global_mean_pool(x)

    def named_params(self, prefix):
        out = []
        for i, block in enumerate(self.blocks):
            out += block.named_params(f"{prefix}.block{i}")
        return out

    def named_states(self, prefix):
        out = []
        for i, block in enumerate(self.blocks):
            out += block.named_states(f"{prefix}.block{i}")
        return out


class MLPHead:
    """linear (-> bn -> relu -> linear)* with optional output batchnorm."""

    def __init__(self, rng, in_dim, hidden, out_dim, depth, out_bn, cfg: HeadConfig,
                 dtype):
        self.linears = []
        self.bns = []
        dims = [in_dim] + [hidden] * (depth - 1) + [out_dim]
        for i in range(depth):
            self.linears.append(Linear(rng, dims[i], dims[i + 1], dtype))
            if i < depth - 1:
                self.bns.append(BatchNorm(dims[i + 1], cfg.bn_eps, cfg.bn_momentum, dtype))
        self.out_bn = BatchNorm(out_dim, cfg.bn_eps, cfg.bn_momentum, dtype) if out_bn else None

    def forward(self, x, mode, update_stats=True):
        for i, lin in enumerate(self.linears):
            x = lin.forward(x)
            if i < len(self.linears) - 1:
                x = T.relu(self.bns[i].forward(x, mode, update_stats))
        if self.out_bn is not None:
            x = self.out_bn.forward(x, mode, update_stats)
        return x

    def named_params(self, prefix):
        out = []
        for i, lin in enumerate(self.linears):
            out += lin.named_params(f"{prefix}.lin{i}")
        for i, bn in enumerate(self.bns):
            out += bn.named_params(f"{prefix}.bn{i}")
        if self.out_bn is not None:
            out += self.out_bn.named_params(f"{prefix}.bn_out")
        return out

    def named_states(self, prefix):
        out = []
        for i, bn in enumerate(self.bns):
            out += bn.named_states(f"{prefix}.bn{i}")
        if self.out_bn is not None:
            out += self.out_bn.named_states(f"{prefix}.bn_out")
        return out


class Encoder:
    """Backbone followed by the projector; same parameters for any view size."""

    def __init__(self, rng, cfg: HeadConfig, dtype):
        self.backbone = Backbone(rng, cfg, dtype)
        self.projector = MLPHead(rng, self.backbone.out_dim, cfg.proj_hidden,
                                 cfg.proj_out, cfg.proj_depth, cfg.proj_out_bn,
                                 cfg, dtype)

    def forward(self, x, mode, update_stats=True):
        return self.projector.forward(self.backbone.forward(x, mode, update_stats),
                                      mode, update_stats)

    def features(self, x, mode="eval", update_stats=False):
        """Backbone output after pooling, before the projector."""
        return self.backbone.forward(x, mode, update_stats)

    def named_params(self, prefix):
        return (self.backbone.named_params(f"{prefix}.backbone")
                + self.projector.named_params(f"{prefix}.projector"))

    def named_states(self, prefix):
        return (self.backbone.named_states(f"{prefix}.backbone")
                + self.projector.named_states(f"{prefix}.projector"))


class SiameseModel:
    """Online encoder, target branch, and one predictor per view type."""

    def __init__(self, cfg: HeadConfig, online: Encoder, target, predictors: dict):
        self.cfg = cfg
        self.online = online
        self.target = target  # None in simsiam mode (stop-gradient alias)
        self.predictors = predictors

    # -- construction -------------------------------------------------------

    @staticmethod
    def create(cfg: HeadConfig, seed: int, view_types=None, dtype=np.float32
               ) -> "SiameseModel":
        """He-uniform init; target starts as an exact copy of online."""
        if view_types is None:
            view_types = list(ViewType)
        online = Encoder(stream(seed, DOMAIN_MODEL, 0), cfg, dtype)

        predictors = {}
        if cfg.shared_predictor:
            shared = MLPHead(stream(seed, DOMAIN_MODEL, 10), cfg.proj_out,
                             cfg.pred_hidden, cfg.proj_out, cfg.pred_depth,
                             cfg.pred_out_bn, cfg, dtype)
            for vt in view_types:
                predictors[vt] = shared
        else:
            # independent init streams per view type
            for i, vt in enumerate(sorted(view_types, key=lambda v: v.value)):
                predictors[vt] = MLPHead(stream(seed, DOMAIN_MODEL, 10 + i),
                                         cfg.proj_out, cfg.pred_hidden, cfg.proj_out,
                                         cfg.pred_depth, cfg.pred_out_bn, cfg, dtype)

        target = None
        if cfg.method in ("byol", "mocov3"):
            target = Encoder(stream(seed, DOMAIN_MODEL, 0), cfg, dtype)
            _copy_branch(online, target)
            for _, t in target.named_params("t"):
                t.requires_grad = False
        return SiameseModel(cfg, online, target, predictors)

    # -- parameter access ----------------------------------------------------

    def predictor_items(self):
        """(view_type, head) pairs, deduplicated when the predictor is shared."""
        seen = []
        for vt in sorted(self.predictors, key=lambda v: v.value):
            head = self.predictors[vt]
            if all(head is not h for _, h in seen):
                seen.append((vt, head))
        return seen

    def trainable_named_params(self):
        out = self.online.named_params("online")
        for vt, head in self.predictor_items():
            name = "shared" if self.cfg.shared_predictor else vt.value
            out += head.named_params(f"predictor.{name}")
        return out

    def target_named_params(self):
        return self.target.named_params("target") if self.target is not None else []

    def named_states(self):
        out = self.online.named_states("online")
        if self.target is not None:
            out += self.target.named_states("target")
        for vt, head in self.predictor_items():
            name = "shared" if self.cfg.shared_predictor else vt.value
            out += head.named_states(f"predictor.{name}")
        return out

    def zero_grad(self):
        for _, p in self.trainable_named_params():
            p.zero_grad()

    # -- forward passes ------------------------------------------------------

    def encode(self, x, mode="train", update_stats=True) -> Tensor:
        """Online-branch projection z of a batch of views."""
        if x.shape[2] < 8 or x.shape[3] < 8:
            raise ShapeError(f"encode needs spatial size >= 8, got {x.shape}")
        z = self.online.forward(_as_tensor_input(x), mode, update_stats)
        if not np.all(np.isfinite(z.data)):
            raise NonFiniteError("encoder produced non-finite projections",
                                 diagnostics={"shape": tuple(z.shape)})
        return z

    def predict(self, vt: ViewType, z, mode="train", update_stats=True) -> Tensor:
        """Apply only view type vt's predictor; grads reach only its params."""
        if vt not in self.predictors:
            raise ConfigError(f"no predictor for view type {vt}")
        return self.predictors[vt].forward(z, mode, update_stats)

    def target_forward(self, x, mode="train") -> np.ndarray:
        """Gradient-free target projection (EMA copy, or stop-gradient alias
        of the online encoder in simsiam mode).  Never updates running stats."""
        branch = self.target if self.target is not None else self.online
        with no_grad():
            z = branch.forward(_as_tensor_input(x), mode, update_stats=False)
        return z.data

    # -- EMA -----------------------------------------------------------------

    def ema_update(self, tau: float) -> None:
        """target <- tau * target + (1 - tau) * online for every parameter and
        running statistic."""
        if self.target is None:
            return
        if not 0.0 <= tau <= 1.0:
            raise ConfigError(f"tau must be in [0, 1], got {tau}")
        on_params = dict(self.online.named_params("x"))
        for name, t in self.target.named_params("x"):
            o = on_params[name]
            t.data = tau * t.data + (1.0 - tau) * o.data
        on_states = {n: (s, f) for n, s, f in self.online.named_states("x")}
        for name, state, fieldname in self.target.named_states("x"):
            src_state, src_field = on_states[name]
            old = getattr(state, fieldname)
            new = tau * old + (1.0 - tau) * getattr(src_state, src_field)
            setattr(state, fieldname, new.astype(old.dtype))


def _as_tensor_input(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _copy_branch(src: Encoder, dst: Encoder) -> None:
    src_params = dict(src.named_params("x"))
    for name, t in dst.named_params("x"):
        t.data = src_params[name].data.copy()
    src_states = {n: (s, f) for n, s, f in src.named_states("x")}
    for name, state, fieldname in dst.named_states("x"):
        s_state, s_field = src_states[name]
        setattr(state, fieldname, getattr(s_state, s_field).copy())
