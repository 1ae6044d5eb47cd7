"""
Bottleneck adapters fused in parallel with frozen blocks.

    A(x) = up(act(down(norm(x))))        y = B(x) + A(x)

``down`` compresses a C x H x W feature raster to C' x ceil(H/r) x ceil(W/r),
``up`` restores C x H x W. A "conv" projection is a k x k convolution
(strided down, transposed up). A "linear" projection is a learned spatial map
over the flattened H*W grid, shared by every channel, followed by a pointwise
channel projection, so every output cell can depend on every input pixel.
The up projection's channel weights and bias start at exactly zero, so a
fresh adapter leaves its block untouched.
"""

import logging
import math
from dataclasses import asdict, dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from mvgc import config as settings
from mvgc.errors import Divergence, InvalidSpec, ShapeMismatch

logger = logging.getLogger(__name__)


PROJECTION_KINDS = ("conv", "linear")
NORM_KINDS = ("batch", "layer")
ACTIVATIONS = ("relu", "gelu")

# Adapter structure family: name -> (down kind, up kind, norm)
STRUCTURE_VARIANTS: Dict[str, Tuple[str, str, str]] = {
    "H": ("conv", "conv", "batch"),
    "B": ("conv", "linear", "layer"),
    "S": ("linear", "conv", "batch"),
    "T": ("linear", "linear", "layer"),
    "ours": ("conv", "linear", "batch"),
}


@dataclass(frozen=True)
class AdapterSpec:
    channels: int
    height: int
    width: int
    down_kind: str = "conv"
    up_kind: str = "linear"
    kernel: int = 3
    ratio: int = settings.DEFAULT_ADAPTER_RATIO
    norm: str = "batch"
    activation: str = "relu"
    channel_ratio: int = 1

    def __post_init__(self):
        if min(self.channels, self.height, self.width) < 1:
            raise InvalidSpec(f"channels and spatial size must be >= 1, got {self.shape}")
        if self.down_kind not in PROJECTION_KINDS or self.up_kind not in PROJECTION_KINDS:
            raise InvalidSpec(f"projection kinds must be in {PROJECTION_KINDS}")
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise InvalidSpec(f"kernel must be odd and >= 1, got {self.kernel}")
        if self.ratio < 1:
            raise InvalidSpec(f"ratio must be >= 1, got {self.ratio}")
        if self.norm not in NORM_KINDS:
            raise InvalidSpec(f"norm must be one of {NORM_KINDS}")
        if self.activation not in ACTIVATIONS:
            raise InvalidSpec(f"activation must be one of {ACTIVATIONS}")
        if self.channel_ratio < 1:
            raise InvalidSpec(f"channel_ratio must be >= 1, got {self.channel_ratio}")

    @property
    def shape(self) -> Tuple[int, int, int]:
        return (self.channels, self.height, self.width)

    @property
    def hidden_channels(self) -> int:
        return max(1, self.channels // self.channel_ratio)

    @property
    def compressed_shape(self) -> Tuple[int, int]:
        return (math.ceil(self.height / self.ratio), math.ceil(self.width / self.ratio))


# =============================================================================
# Parameter accounting
# =============================================================================


def _projection_params(kind: str, c_in: int, c_out: int, kernel: int, cells_in: int, cells_out: int) -> int:
    if kind == "conv":
        return kernel * kernel * c_in * c_out + c_out
    return cells_in * cells_out + c_in * c_out + c_out


def param_breakdown(spec: AdapterSpec) -> List[dict]:
    """Trainable parameters per layer (running statistics excluded).

    conv: k*k*C_in*C_out + C_out.  linear: HW*hw + C_in*C_out + C_out, where
    HW and hw are the full and compressed cell counts.
    """
    c, hidden = spec.channels, spec.hidden_channels
    full = spec.height * spec.width
    small = spec.compressed_shape[0] * spec.compressed_shape[1]
    return [
        {"layer": "norm", "kind": spec.norm, "params": 2 * c},
        {
            "layer": "down",
            "kind": spec.down_kind,
            "params": _projection_params(spec.down_kind, c, hidden, spec.kernel, full, small),
        },
        {
            "layer": "up",
            "kind": spec.up_kind,
            "params": _projection_params(spec.up_kind, hidden, c, spec.kernel, small, full),
        },
    ]


def param_count(spec: AdapterSpec) -> int:
    return sum(entry["params"] for entry in param_breakdown(spec))


def structure_table(
    channels: int,
    ratio: int,
    kernel: int,
    height: int = settings.ADAPTER_BENCH_RASTER[0],
    width: int = settings.ADAPTER_BENCH_RASTER[1],
) -> List[dict]:
    """Parameter counts of every structure variant at one (C, r, k) and raster."""
    rows = []
    for name, (down, up, norm) in STRUCTURE_VARIANTS.items():
        spec = AdapterSpec(channels, height, width, down, up, kernel, ratio, norm)
        rows.append({"variant": name, "down": down, "up": up, "norm": norm, "params": param_count(spec)})
    return rows


def check_structure_algebra(
    channels: int,
    ratio: int,
    kernel: int,
    height: int = settings.ADAPTER_BENCH_RASTER[0],
    width: int = settings.ADAPTER_BENCH_RASTER[1],
) -> List[str]:
    """Relations of the structure family that fail at (C, r, k); empty when all hold.

    The mixed variants are equal by construction. The strict ordering needs
    (k*k - 1) * C * C' > HW * hw, so it is checked on a given raster.
    """
    counts = {row["variant"]: row["params"] for row in structure_table(channels, ratio, kernel, height, width)}
    violated = []
    if counts["S"] != counts["ours"]:
        violated.append(f"count(linear,conv)={counts['S']} != count(conv,linear)={counts['ours']}")
    if not counts["H"] > counts["ours"]:
        violated.append(f"count(conv,conv)={counts['H']} <= count(conv,linear)={counts['ours']}")
    if not counts["ours"] > counts["T"]:
        violated.append(f"count(conv,linear)={counts['ours']} <= count(linear,linear)={counts['T']}")
    return violated


# =============================================================================
# Modules
# =============================================================================


class ChannelLayerNorm(nn.Module):
    """LayerNorm over the channel axis of an (N, C, H, W) raster."""

    def __init__(self, channels: int, eps: float = 1e-5):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(channels))
        self.bias = nn.Parameter(torch.zeros(channels))
        self.eps = eps

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        y = F.layer_norm(x.permute(0, 2, 3, 1), (x.shape[1],), self.weight, self.bias, self.eps)
        return y.permute(0, 3, 1, 2)


class SpatialLinear(nn.Module):
    """Spatial map on the flattened grid of each channel, then a 1x1 channel projection."""

    def __init__(self, c_in: int, c_out: int, size_in: Tuple[int, int], size_out: Tuple[int, int]):
        super().__init__()
        self.size_out = size_out
        self.spatial = nn.Linear(size_in[0] * size_in[1], size_out[0] * size_out[1], bias=False)
        self.channel = nn.Conv2d(c_in, c_out, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        n, c = x.shape[:2]
        z = self.spatial(x.reshape(n, c, -1)).reshape(n, c, *self.size_out)
        return self.channel(z)


def nearest_upsampling_matrix(size_in: Tuple[int, int], size_out: Tuple[int, int], ratio: int) -> torch.Tensor:
    """(H*W, h*w) matrix copying each compressed cell onto its r x r block."""
    rows = torch.arange(size_out[0]) // ratio
    cols = torch.arange(size_out[1]) // ratio
    source = (rows[:, None] * size_in[1] + cols[None, :]).reshape(-1)
    return F.one_hot(source, size_in[0] * size_in[1]).to(torch.float32)


def _seeded_(weight: torch.Tensor, generator: torch.Generator) -> None:
    fan_in = weight[0].numel()
    weight.copy_(torch.randn(weight.shape, generator=generator) / math.sqrt(fan_in))


class BottleneckAdapter(nn.Module):
    def __init__(self, spec: AdapterSpec, seed: int = 0):
        super().__init__()
        self.spec = spec
        c, h, k, r = spec.channels, spec.hidden_channels, spec.kernel, spec.ratio
        full, small = (spec.height, spec.width), spec.compressed_shape

        self.norm = nn.BatchNorm2d(c) if spec.norm == "batch" else ChannelLayerNorm(c)
        if spec.down_kind == "conv":
            self.down = nn.Conv2d(c, h, k, stride=r, padding=k // 2)
        else:
            self.down = SpatialLinear(c, h, full, small)
        if spec.up_kind == "conv":
            self.up = nn.ConvTranspose2d(h, c, k, stride=r, padding=k // 2)
        else:
            self.up = SpatialLinear(h, c, small, full)
        self.act = nn.ReLU() if spec.activation == "relu" else nn.GELU()
        self.reset_parameters(seed)

    def reset_parameters(self, seed: int) -> None:
        """Seeded down weights, zero down bias; up output exactly zero."""
        generator = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            if isinstance(self.down, SpatialLinear):
                _seeded_(self.down.spatial.weight, generator)
                _seeded_(self.down.channel.weight, generator)
                self.down.channel.bias.zero_()
            else:
                _seeded_(self.down.weight, generator)
                self.down.bias.zero_()
            if isinstance(self.up, SpatialLinear):
                spec = self.spec
                upsample = nearest_upsampling_matrix(spec.compressed_shape, (spec.height, spec.width), spec.ratio)
                self.up.spatial.weight.copy_(upsample)
                nn.init.zeros_(self.up.channel.weight)
                nn.init.zeros_(self.up.channel.bias)
            else:
                nn.init.zeros_(self.up.weight)
                nn.init.zeros_(self.up.bias)

    def _check(self, x: torch.Tensor) -> None:
        if x.dim() != 4 or tuple(x.shape[1:]) != self.spec.shape:
            raise ShapeMismatch(f"expected (N, {self.spec.shape}), got {tuple(x.shape)}")

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        self._check(x)
        z = self.act(self.down(self.norm(x)))
        if self.spec.up_kind == "conv":
            return self.up(z, output_size=(self.spec.height, self.spec.width))
        return self.up(z)


class BlockStub(nn.Module):
    """Frozen 3x3 convolution plus tanh standing in for a pre-trained block."""

    def __init__(self, channels: int, seed: int = 0, trainable: bool = False):
        super().__init__()
        self.conv = nn.Conv2d(channels, channels, 3, padding=1)
        generator = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            fan_in = self.conv.weight[0].numel()
            self.conv.weight.copy_(torch.randn(self.conv.weight.shape, generator=generator) / math.sqrt(fan_in))
            self.conv.bias.copy_(0.1 * torch.randn(channels, generator=generator))
        self.conv.requires_grad_(trainable)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return torch.tanh(self.conv(x))


class AdaptedBlock(nn.Module):
    """y = B(x) + A(x); ``bypass`` drops the adapter branch."""

    def __init__(self, block: nn.Module, adapter: Optional[BottleneckAdapter] = None):
        super().__init__()
        self.block = block
        self.adapter = adapter
        self.bypass = False

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        y = self.block(x)
        if self.adapter is None or self.bypass:
            return y
        if y.shape != x.shape:
            raise ShapeMismatch(f"block output {tuple(y.shape)} does not match input {tuple(x.shape)}")
        return y + self.adapter(x)


# =============================================================================
# Functional surface
# =============================================================================


@dataclass(eq=False)
class AdapterState:
    spec: AdapterSpec
    tensors: Dict[str, torch.Tensor]


def _as_batch(spec: AdapterSpec, x: torch.Tensor) -> Tuple[torch.Tensor, bool]:
    x = torch.as_tensor(x, dtype=torch.float32)
    if x.dim() == 3:
        x, squeeze = x.unsqueeze(0), True
    else:
        squeeze = False
    if x.dim() != 4 or tuple(x.shape[1:]) != spec.shape:
        raise ShapeMismatch(f"expected {spec.shape} rasters, got {tuple(x.shape)}")
    return x, squeeze


def adapter_init(spec: AdapterSpec, seed: int = 0) -> AdapterState:
    module = BottleneckAdapter(spec, seed)
    return AdapterState(spec, {k: v.detach().clone() for k, v in module.state_dict().items()})


def build_adapter(state: AdapterState) -> BottleneckAdapter:
    module = BottleneckAdapter(state.spec)
    module.load_state_dict(state.tensors)
    return module.eval()


def adapter_forward(spec: AdapterSpec, state: AdapterState, x: torch.Tensor) -> torch.Tensor:
    """A(x) for a (C, H, W) raster or an (N, C, H, W) batch, evaluation mode."""
    if state.spec != spec:
        raise InvalidSpec("adapter state was built for another spec")
    batch, squeeze = _as_batch(spec, x)
    with torch.no_grad():
        out = build_adapter(state)(batch)
    return out[0] if squeeze else out


def fused_forward(
    block: nn.Module, spec: AdapterSpec, state: AdapterState, x: torch.Tensor, bypass: bool = False
) -> torch.Tensor:
    """B(x) + A(x); with ``bypass`` just B(x)."""
    batch, squeeze = _as_batch(spec, x)
    fused = AdaptedBlock(block, build_adapter(state))
    fused.bypass = bypass
    with torch.no_grad():
        out = fused(batch)
    return out[0] if squeeze else out


def state_to_dict(state: AdapterState) -> dict:
    return {
        "spec": asdict(state.spec),
        "tensors": {
            name: {
                "shape": list(t.shape),
                "dtype": str(t.dtype).replace("torch.", ""),
                "values": t.reshape(-1).tolist(),
            }
            for name, t in state.tensors.items()
        },
    }


def state_from_dict(data: dict) -> AdapterState:
    try:
        spec = AdapterSpec(**data["spec"])
        tensors = {
            name: torch.tensor(entry["values"], dtype=getattr(torch, entry["dtype"])).reshape(entry["shape"])
            for name, entry in data["tensors"].items()
        }
    except (KeyError, TypeError, AttributeError, RuntimeError) as e:
        raise InvalidSpec(f"malformed adapter state: {e}") from e
    return AdapterState(spec, tensors)


# =============================================================================
# Label-efficient adaptation demo
# =============================================================================


class RegressionHead(nn.Module):
    def __init__(self, channels: int, seed: int = 0):
        super().__init__()
        self.linear = nn.Linear(channels, 1)
        generator = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            self.linear.weight.copy_(torch.randn(self.linear.weight.shape, generator=generator))
            self.linear.bias.zero_()

    def forward(self, features: torch.Tensor) -> torch.Tensor:
        return self.linear(features.mean(dim=(2, 3))).squeeze(-1)


@dataclass(eq=False)
class RegressionDomain:
    """Scalar regression on feature rasters; observed inputs are ``scale * x + offset``.

    Labels always come from the clean ``x`` through a fixed reference block
    and readout, so domains built from one seed share the task.
    """

    reference: BlockStub
    readout: RegressionHead
    channels: int
    height: int
    width: int
    scale: float = 1.0
    offset: float = 0.0

    def sample(self, n: int, generator: torch.Generator) -> Tuple[torch.Tensor, torch.Tensor]:
        shape = (n, self.channels, self.height, self.width)
        x = torch.randn((n, self.channels, 1, 1), generator=generator) + 0.5 * torch.randn(shape, generator=generator)
        with torch.no_grad():
            y = self.readout(self.reference(x))
        return x * self.scale + self.offset, y


def make_regression_domain(
    seed: int = 0, scale: float = 1.0, offset: float = 0.0, channels: int = 4, height: int = 8, width: int = 8
) -> RegressionDomain:
    return RegressionDomain(
        reference=BlockStub(channels, seed),
        readout=RegressionHead(channels, seed + 1),
        channels=channels,
        height=height,
        width=width,
        scale=scale,
        offset=offset,
    )


@dataclass
class LedaReport:
    k_percent: float
    adapt_samples: int
    steps: int
    trainable_params: int
    source_err: float
    target_err_before: float
    target_err_after: float
    source_retention_err: float

    @property
    def relative_reduction(self) -> float:
        if self.target_err_before == 0:
            return 0.0
        return 1.0 - self.target_err_after / self.target_err_before

    def to_dict(self) -> dict:
        out = asdict(self)
        out["relative_reduction"] = self.relative_reduction
        return out


def _mse(model: Callable[[torch.Tensor], torch.Tensor], x: torch.Tensor, y: torch.Tensor) -> float:
    with torch.no_grad():
        return float(F.mse_loss(model(x), y))


def _train(params: Sequence[torch.Tensor], loss_fn: Callable[[], torch.Tensor], optimizer, steps: int, what: str) -> None:
    for step in range(steps):
        optimizer.zero_grad()
        loss = loss_fn()
        if not torch.isfinite(loss):
            raise Divergence(f"{what} loss became non-finite at step {step}")
        loss.backward()
        optimizer.step()


def leda_demo(
    source_fn: RegressionDomain,
    target_fn: RegressionDomain,
    k_percent: float,
    steps: int = 300,
    lr: float = 1e-2,
    seed: int = settings.DEFAULT_SEED,
    spec: Optional[AdapterSpec] = None,
    pool_size: int = 2000,
    eval_size: int = 500,
    pretrain_steps: int = 500,
    pretrain_lr: float = 0.1,
) -> LedaReport:
    """Pretrain on the source, freeze, then adapt only an adapter on k% of the target pool."""
    if not 0.0 < k_percent <= 1.0:
        raise InvalidSpec(f"k_percent must lie in (0, 1], got {k_percent}")
    if steps < 0 or pretrain_steps < 0:
        raise InvalidSpec("step counts must be >= 0")
    shape = (source_fn.channels, source_fn.height, source_fn.width)
    if shape != (target_fn.channels, target_fn.height, target_fn.width):
        raise ShapeMismatch("source and target domains must share the raster shape")
    spec = spec or AdapterSpec(*shape, down_kind="conv", up_kind="linear", ratio=2)
    if spec.shape != shape:
        raise ShapeMismatch(f"adapter spec {spec.shape} does not match domain {shape}")

    torch.manual_seed(seed)
    generator = torch.Generator().manual_seed(seed)
    x_src, y_src = source_fn.sample(pool_size, generator)
    x_src_eval, y_src_eval = source_fn.sample(eval_size, generator)
    x_tgt, y_tgt = target_fn.sample(pool_size, generator)
    x_tgt_eval, y_tgt_eval = target_fn.sample(eval_size, generator)

    logger.info("=" * 70)
    logger.info(f"LEDA demo: k={k_percent:.1%}, adapter {spec.down_kind}/{spec.up_kind} r={spec.ratio}")
    logger.info("=" * 70)

    # Source pretraining with plain gradient descent
    block = BlockStub(spec.channels, seed + 100, trainable=True)
    head = RegressionHead(spec.channels, seed + 101)
    student = AdaptedBlock(block, BottleneckAdapter(spec, seed + 102))
    student.bypass = True

    def predict(x: torch.Tensor) -> torch.Tensor:
        return head(student(x))

    pretrain_params = list(block.parameters()) + list(head.parameters())
    _train(
        pretrain_params,
        lambda: F.mse_loss(predict(x_src), y_src),
        torch.optim.SGD(pretrain_params, lr=pretrain_lr),
        pretrain_steps,
        "pretraining",
    )
    for p in pretrain_params:
        p.requires_grad_(False)
    source_err = _mse(predict, x_src_eval, y_src_eval)
    with torch.no_grad():
        source_reference = predict(x_src_eval).clone()
    logger.info(f"  source MSE after pretraining: {source_err:.6f}")

    student.bypass = False
    student.eval()
    target_err_before = _mse(predict, x_tgt_eval, y_tgt_eval)

    # Adapter-only adaptation on the labelled target fraction
    n_adapt = max(1, int(round(k_percent * pool_size)))
    x_adapt, y_adapt = x_tgt[:n_adapt], y_tgt[:n_adapt]
    adapter_params = list(student.adapter.parameters())
    student.adapter.train()
    _train(
        adapter_params,
        lambda: F.mse_loss(predict(x_adapt), y_adapt),
        torch.optim.Adam(adapter_params, lr=lr),
        steps,
        "adaptation",
    )
    student.eval()
    target_err_after = _mse(predict, x_tgt_eval, y_tgt_eval)

    student.bypass = True
    with torch.no_grad():
        retention = float((predict(x_src_eval) - source_reference).abs().max())
    student.bypass = False

    report = LedaReport(
        k_percent=k_percent,
        adapt_samples=n_adapt,
        steps=steps,
        trainable_params=sum(p.numel() for p in adapter_params),
        source_err=source_err,
        target_err_before=target_err_before,
        target_err_after=target_err_after,
        source_retention_err=retention,
    )
    mark = "✓" if retention == 0.0 else "✗"
    logger.info(
        f"{mark} target MSE {target_err_before:.5f} -> {target_err_after:.5f} "
        f"({report.relative_reduction:.1%} lower), source retention err {retention:g}"
    )
    return report
