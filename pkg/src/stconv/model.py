"""U-Net of LCAM blocks with a crop + channel-time fold head and STR refinement.

Layout for ``levels=3`` and init width C::

    stem 1x1x1 (11 -> C)
    enc.0   LCAM x2 @ C      -- skip --------------------------+
    down.0  maxpool 1x2x2, 1x1x1 (C -> 2C)                     |
    enc.1   LCAM x2 @ 2C     -- skip ----------------+         |
    down.1  maxpool 1x2x2, 1x1x1 (2C -> 4C)          |         |
    mid     LCAM x2 @ 4C                             |         |
    up.1    nearest x2, 1x1x1 (4C -> 2C), concat <---+         |
    dec.1   1x1x1 fuse (4C -> 2C), LCAM x2 @ 2C                |
    up.0    nearest x2, 1x1x1 (2C -> C), concat <--------------+
    dec.0   1x1x1 fuse (2C -> C), LCAM x2 @ C
    head    1x1x1 (C -> t_out/t_in), center crop, fold -> y_early
    str     refinement -> y_final

``arch="unet3d"`` swaps every LCAM for two dense 3x3x3 conv + ReLU layers
and drops STR; ``arch="single"`` is one dense 3x3x3 conv feeding the head.
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import autograd as ad
from .blocks import LcamConfig, StrConfig, init_conv, init_lcam, init_str, lcam_forward, str_forward
from .conv import ConvSpec, conv_macs, flops_decomposed, flops_full, param_count
from .formats import read_archive, write_archive
from .tensor import ShapeError

ARCHS = ("sianet", "unet3d", "single")


@dataclass(frozen=True)
class ModelConfig:
    arch: str = "sianet"
    in_channels: int = 11
    t_in: int = 4
    t_out: int = 32
    init_filters: int = 32
    levels: int = 3
    crop_factor: int = 6
    group_count: int = 2
    lcam_dilation: int = 1
    lcam_residual: bool = True
    str_norm: str = "softmax"
    str_attention: str = "decomposed"
    dropout_rate: float = 0.4
    dtype: str = "float32"

    def __post_init__(self):
        if self.arch not in ARCHS:
            raise ValueError(f"arch must be one of {ARCHS}, got {self.arch!r}")
        for name in ("in_channels", "t_in", "t_out", "init_filters", "levels", "crop_factor"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.t_out % self.t_in:
            raise ValueError(f"t_out={self.t_out} must be divisible by t_in={self.t_in}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError(f"dropout_rate must lie in [0, 1), got {self.dropout_rate}")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"dtype must be float32 or float64, got {self.dtype!r}")
        if self.arch == "sianet":
            for c in self.widths:
                LcamConfig(c, self.group_count, self.lcam_dilation)  # raises on uneven split
        self.str_config  # validates norm / attention

    @property
    def head_channels(self) -> int:
        return self.t_out // self.t_in

    @property
    def widths(self) -> list[int]:
        return [self.init_filters * 2**i for i in range(self.levels)]

    @property
    def str_config(self) -> StrConfig:
        return StrConfig(1, self.str_norm, self.str_attention)

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    def lcam(self, channels: int) -> LcamConfig:
        return LcamConfig(channels, self.group_count, self.lcam_dilation, self.lcam_residual)

    def check_input(self, shape) -> None:
        expected = (self.in_channels, self.t_in)
        if len(shape) != 5 or tuple(shape[1:3]) != expected:
            raise ShapeError(f"expected input (N, {self.in_channels}, {self.t_in}, H, W), got {tuple(shape)}")
        h, w = shape[3], shape[4]
        div = 2 ** (self.levels - 1) if self.arch != "single" else 1
        for name, e in (("H", h), ("W", w)):
            if e % div or e % self.crop_factor:
                raise ShapeError(f"input {name}={e} must be divisible by {div} and by crop factor {self.crop_factor}")

    def output_shape(self, input_shape) -> tuple[int, int, int, int, int]:
        n, _, _, h, w = input_shape
        return (n, 1, self.t_out, h // self.crop_factor, w // self.crop_factor)


class ParamStore:
    """Named learnable arrays with same-shaped gradient buffers, in insertion order."""

    def __init__(self, values=None):
        self._values: OrderedDict[str, np.ndarray] = OrderedDict()
        self._grads: OrderedDict[str, np.ndarray] = OrderedDict()
        for name, arr in (values or {}).items():
            self.add(name, arr)

    def add(self, name: str, arr: np.ndarray) -> None:
        if name in self._values:
            raise KeyError(f"duplicate parameter name {name!r}")
        arr = np.ascontiguousarray(arr)
        self._values[name] = arr
        self._grads[name] = np.zeros_like(arr)

    def __getitem__(self, name):
        return self._values[name]

    def __contains__(self, name):
        return name in self._values

    def __len__(self):
        return len(self._values)

    def __iter__(self):
        return iter(self._values)

    def names(self):
        return list(self._values)

    def items(self):
        return self._values.items()

    def grad(self, name) -> np.ndarray:
        return self._grads[name]

    def grads(self):
        return self._grads.items()

    def num_params(self) -> int:
        return int(sum(a.size for a in self._values.values()))

    def zero_grad(self) -> None:
        for g in self._grads.values():
            g.fill(0)

    def as_vars(self, requires_grad: bool = True) -> dict[str, ad.Var]:
        """Wrap every array in a Var; the Vars share memory with the store."""
        return {k: ad.Var(v, requires_grad, k) for k, v in self._values.items()}

    def collect_grads(self, vars: dict[str, ad.Var]) -> None:
        for k, v in vars.items():
            if v.grad is not None:
                self._grads[k] += v.grad

    def state_dict(self) -> OrderedDict:
        return OrderedDict((k, v.copy()) for k, v in self._values.items())

    def load_state_dict(self, state) -> None:
        missing = set(self._values) - set(state)
        extra = set(state) - set(self._values)
        if missing or extra:
            raise KeyError(f"parameter mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for k, v in state.items():
            v = np.asarray(v)
            if v.size != self._values[k].size:
                raise ShapeError(f"{k}: expected {self._values[k].shape}, got {v.shape}")
            self._values[k][...] = v.reshape(self._values[k].shape)


def conv_plan(cfg: ModelConfig, input_shape) -> list[tuple[str, ConvSpec, tuple]]:
    """Every conv the forward pass runs, as (param name, spec, input shape)."""
    n, _, t, h, w = input_shape
    plan = []

    def add(name, spec, c, hh, ww):
        plan.append((name, spec, (n, c, t, hh, ww)))

    def block(prefix, c, hh, ww):
        if cfg.arch == "unet3d":
            for j in range(2):
                add(f"{prefix}conv{j}", ConvSpec(c, c, (3, 3, 3)), c, hh, ww)
        else:
            for name, spec in cfg.lcam(c).conv_specs().items():
                add(prefix + name, spec, spec.c_in, hh, ww)

    if cfg.arch == "single":
        add("body", ConvSpec(cfg.in_channels, cfg.init_filters, (3, 3, 3)), cfg.in_channels, h, w)
    else:
        widths = cfg.widths
        add("stem", ConvSpec(cfg.in_channels, widths[0], (1, 1, 1)), cfg.in_channels, h, w)
        hh, ww = h, w
        for lvl in range(cfg.levels - 1):
            c = widths[lvl]
            for j in range(2):
                block(f"enc.{lvl}.b{j}.", c, hh, ww)
            hh, ww = hh // 2, ww // 2
            add(f"down.{lvl}", ConvSpec(c, widths[lvl + 1], (1, 1, 1)), c, hh, ww)
        for j in range(2):
            block(f"mid.b{j}.", widths[-1], hh, ww)
        for lvl in reversed(range(cfg.levels - 1)):
            c = widths[lvl]
            hh, ww = hh * 2, ww * 2
            add(f"up.{lvl}", ConvSpec(widths[lvl + 1], c, (1, 1, 1)), widths[lvl + 1], hh, ww)
            add(f"dec.{lvl}.fuse", ConvSpec(2 * c, c, (1, 1, 1)), 2 * c, hh, ww)
            for j in range(2):
                block(f"dec.{lvl}.b{j}.", c, hh, ww)
    add("head", ConvSpec(cfg.init_filters, cfg.head_channels, (1, 1, 1)), cfg.init_filters, h, w)
    if cfg.arch == "sianet":
        hc, wc = h // cfg.crop_factor, w // cfg.crop_factor
        for name, spec in cfg.str_config.conv_specs().items():
            plan.append(("str." + name, spec, (n, 1, cfg.t_out, hc, wc)))
    return plan


def build(cfg: ModelConfig, rng_seed: int = 0) -> ParamStore:
    """Initialise every parameter; the result depends only on (cfg, seed)."""
    rng = np.random.default_rng(rng_seed)
    dt = cfg.np_dtype
    params: dict[str, np.ndarray] = {}
    # the plan is shape-independent apart from extents, so any legal input works
    probe = (1, cfg.in_channels, cfg.t_in, 2 ** cfg.levels * cfg.crop_factor, 2 ** cfg.levels * cfg.crop_factor)
    str_done = False
    for name, spec, _ in conv_plan(cfg, probe):
        if name.startswith("str."):
            if not str_done:
                init_str(params, "str.", cfg.str_config, rng, dt)
                str_done = True
            continue
        init_conv(params, name, spec, rng, dt)
    return ParamStore(params)


def _lcam_pair(x, p, cfg, prefix, c, tape, mode, seed, counter):
    for j in range(2):
        pre = f"{prefix}b{j}."
        if cfg.arch == "unet3d":
            for k in range(2):
                spec = ConvSpec(c, c, (3, 3, 3))
                x = ad.relu(ad.conv3d(x, p[f"{pre}conv{k}.weight"], p[f"{pre}conv{k}.bias"], spec, tape), tape)
            x = ad.dropout(x, cfg.dropout_rate, mode, None if seed is None else [seed, counter[0]], tape)
        else:
            x = lcam_forward(x, p, cfg.lcam(c), tape, pre, mode, cfg.dropout_rate,
                             None if seed is None else [seed, counter[0]])
        counter[0] += 1
    return x


def _conv1(x, p, name, c_in, c_out, tape):
    return ad.conv3d(x, p[name + ".weight"], p[name + ".bias"], ConvSpec(c_in, c_out, (1, 1, 1)), tape)


def forward(x, params, cfg: ModelConfig, mode: str = "eval", rng_seed: int | None = None, tape=None,
            zero_skips: bool = False):
    """Run the network; returns ``(y_early, y_final)`` logits as Vars.

    ``params`` is a ParamStore or a ``{name: Var}`` mapping (the latter when
    gradients are wanted). ``x`` may be an array or a Var.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    if mode == "train" and cfg.dropout_rate > 0 and rng_seed is None:
        raise ValueError("train mode needs rng_seed for dropout")
    p = params.as_vars(requires_grad=False) if isinstance(params, ParamStore) else params
    if not isinstance(x, ad.Var):
        x = ad.Var(np.asarray(x, dtype=cfg.np_dtype))
    cfg.check_input(x.shape)
    counter = [0]

    if cfg.arch == "single":
        h = ad.relu(ad.conv3d(x, p["body.weight"], p["body.bias"],
                              ConvSpec(cfg.in_channels, cfg.init_filters, (3, 3, 3)), tape), tape)
    else:
        widths = cfg.widths
        h = ad.relu(_conv1(x, p, "stem", cfg.in_channels, widths[0], tape), tape)
        skips = []
        for lvl in range(cfg.levels - 1):
            h = _lcam_pair(h, p, cfg, f"enc.{lvl}.", widths[lvl], tape, mode, rng_seed, counter)
            skips.append(h)
            h = ad.max_pool_hw(h, tape)
            h = ad.relu(_conv1(h, p, f"down.{lvl}", widths[lvl], widths[lvl + 1], tape), tape)
        h = _lcam_pair(h, p, cfg, "mid.", widths[-1], tape, mode, rng_seed, counter)
        for lvl in reversed(range(cfg.levels - 1)):
            c = widths[lvl]
            h = ad.relu(_conv1(ad.upsample_hw(h, tape), p, f"up.{lvl}", widths[lvl + 1], c, tape), tape)
            skip = skips[lvl]
            if zero_skips:
                skip = ad.Var(np.zeros_like(skip.data))
            h = ad.concat_channels([h, skip], tape)
            h = ad.relu(_conv1(h, p, f"dec.{lvl}.fuse", 2 * c, c, tape), tape)
            h = _lcam_pair(h, p, cfg, f"dec.{lvl}.", c, tape, mode, rng_seed, counter)

    h = _conv1(h, p, "head", cfg.init_filters, cfg.head_channels, tape)
    h = ad.crop_center(h, cfg.crop_factor, tape)
    y_early = ad.fold_time(h, tape)
    if cfg.arch == "sianet":
        y_final = str_forward(y_early, p, cfg.str_config, tape, "str.")
    else:
        y_final = y_early
    return y_early, y_final


def predict_logits(x, params: ParamStore, cfg: ModelConfig, batch_size: int = 8) -> np.ndarray:
    """Eval-mode y_final logits for a stack of inputs, batch by batch."""
    x = np.asarray(x, dtype=cfg.np_dtype)
    cfg.check_input(x.shape)
    p = params.as_vars(requires_grad=False)
    outs = [forward(x[i:i + batch_size], p, cfg, "eval")[1].data for i in range(0, len(x), batch_size)]
    return np.concatenate(outs, axis=0)


@dataclass
class LayerCost:
    name: str
    spec: ConvSpec
    params: int
    macs: int


@dataclass
class Decomposition:
    """A spatial + temporal conv pair next to its dense 3D equivalent."""

    name: str
    decomposed_macs: int
    dense_macs: int
    kernel: tuple = (3, 3, 3)

    @property
    def ratio(self) -> float:
        return self.decomposed_macs / self.dense_macs

    @property
    def tap_ratio(self) -> str:
        """Per-output-cell cost ratio as unreduced taps, e.g. ``12/27``."""
        k_t, k_h, k_w = self.kernel
        return f"{k_t + k_h * k_w}/{k_t * k_h * k_w}"


@dataclass
class FlopsReport:
    layers: list = field(default_factory=list)
    decompositions: list = field(default_factory=list)

    @property
    def total_macs(self) -> int:
        return sum(l.macs for l in self.layers)

    @property
    def total_params(self) -> int:
        return sum(l.params for l in self.layers)

    @property
    def dense_equivalent_macs(self) -> int:
        """Total cost if every decomposed pair were one dense conv."""
        return self.total_macs - sum(d.decomposed_macs for d in self.decompositions) + sum(
            d.dense_macs for d in self.decompositions)


def count_model_flops(cfg: ModelConfig, input_shape) -> FlopsReport:
    """Per-layer parameter and multiply-accumulate counts for one sample."""
    input_shape = (1,) + tuple(input_shape[1:])
    cfg.check_input(input_shape)
    report = FlopsReport()
    spatial = {}
    for name, spec, in_shape in conv_plan(cfg, input_shape):
        report.layers.append(LayerCost(name, spec, param_count(spec), conv_macs(spec, in_shape)))
        _, c, t, h, w = in_shape
        k_t, k_h, k_w = spec.kernel
        if name.endswith("spatial"):
            spatial[name[:-len("spatial")]] = (spec, in_shape)
        elif name.endswith("temporal") and name[:-len("temporal")] in spatial:
            prefix = name[:-len("temporal")]
            sspec, _ = spatial[prefix]
            _, sk_h, sk_w = sspec.kernel
            report.decompositions.append(Decomposition(
                prefix.rstrip("."),
                t * flops_decomposed(h, w, c, spec.c_out, k_t, sk_h, sk_w),
                t * flops_full(h, w, c, spec.c_out, k_t, sk_h, sk_w), (k_t, sk_h, sk_w)))
        elif cfg.arch == "single" and k_t > 1 and k_h * k_w > 1:
            report.decompositions.append(Decomposition(
                name, t * flops_decomposed(h, w, spec.c_in, spec.c_out, k_t, k_h, k_w),
                t * flops_full(h, w, spec.c_in, spec.c_out, k_t, k_h, k_w), spec.kernel))
    return report


def dense_counterpart(cfg: ModelConfig) -> ModelConfig:
    """Plain U-Net3D with the same widths and depth."""
    return replace(cfg, arch="unet3d")


def checkpoint_config_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".cfg")


def save_checkpoint(path, params: ParamStore, cfg: ModelConfig, extra_config: dict | None = None) -> None:
    """STAR archive of every parameter, plus the model config as a sidecar text file.

    Biases are stored as (C, 1, 1, 1, 1) tensors since STSR is 5-axis only.
    """
    from .config import dump_config

    entries = [(k, v.reshape(v.shape + (1,) * (5 - v.ndim))) for k, v in params.items()]
    write_archive(path, entries)
    checkpoint_config_path(path).write_text(dump_config(cfg, extra_config), encoding="utf-8")


def load_checkpoint(path, cfg: ModelConfig | None = None) -> tuple[ParamStore, ModelConfig]:
    from .config import load_config

    if cfg is None:
        cfg, _ = load_config(checkpoint_config_path(path))
    params = build(cfg, 0)
    params.load_state_dict(read_archive(path))
    return params, cfg


def config_dict(cfg: ModelConfig) -> dict:
    return asdict(cfg)


MODEL_KEYS = tuple(f.name for f in fields(ModelConfig))
