"""The partitioned coupled operator: lifting, grid alignment, Fourier layers
with the joint region/channel convolution, projection, and baseline variants.

Variants:

- ``pcno``: per-mode region mixing (E x E) followed by per-region channel
  mixing, separately on the low and high temporal bands.
- ``pcno-c``: same, but the channel map is shared by all regions.
- ``pcno-3d``: one weight tensor applied after a third transform along the
  region axis (low temporal + high temporal bands, low spatial band).
- ``fno-2d``: no grid alignment; each region gets its own spectral weights
  and is convolved independently.
- ``fno-3d``: region-axis transform with corner-block truncation in both the
  temporal and spatial spectra (four blocks).

Tensors flow as (batch, channel, region, time, space) between alignment and
un-alignment, and (batch, channel, time, space) per region outside.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, wrap
from .field_encoding import NormStats

VARIANTS = ("pcno", "pcno-c", "pcno-3d", "fno-2d", "fno-3d")


@dataclass(frozen=True)
class PcnoConfig:
    n_regions: int
    d_in: int
    d_out: int = 2
    layers: int = 4
    width: int = 64
    z_t: int = 25
    z_x: int = 25
    r_t: float = 0.0
    r_x: float = 0.001
    variant: str = "pcno"
    z_e: int = 3              # region-axis modes kept by the 3d variants
    proj_width: int = 128

    def __post_init__(self) -> None:
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.layers < 1 or self.width < 1:
            raise ValueError("layers and width must be >= 1")
        if self.z_t < 1 or self.z_x < 1:
            raise ValueError("mode cutoffs must be positive")
        if self.r_t < 0 or self.r_x < 0:
            raise ValueError("padding ratios must be >= 0")
        if self.variant in ("pcno-3d", "fno-3d") and not (1 <= self.z_e <= self.n_regions):
            raise ValueError("z_e must lie in [1, n_regions]")

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in (
            "n_regions", "d_in", "d_out", "layers", "width", "z_t", "z_x",
            "r_t", "r_x", "variant", "z_e", "proj_width")}

    @staticmethod
    def from_dict(obj: dict) -> "PcnoConfig":
        return PcnoConfig(**obj)


@dataclass(frozen=True)
class AlignmentPlan:
    """Per-region zero-padding that gives every region the same grid extents."""

    d_t: int
    d_x: tuple[int, ...]
    pads_t: tuple[int, int]
    pads_x: tuple[tuple[int, int], ...]

    @property
    def d_t_aligned(self) -> int:
        return self.d_t + self.pads_t[0] + self.pads_t[1]

    @property
    def d_x_aligned(self) -> int:
        return self.d_x[0] + self.pads_x[0][0] + self.pads_x[0][1]


def plan_alignment(d_t: int, d_x: Sequence[int], r_t: float, r_x: float) -> AlignmentPlan:
    """Head/tail pad lengths: symmetric ratio padding in time, and in space a
    ratio margin around each region centered within the largest extent."""
    pad_t = int(math.floor(d_t * r_t))
    d_x = tuple(int(v) for v in d_x)
    d_x_max = max(d_x)
    margin = int(math.floor(d_x_max * r_x))
    pads_x = []
    for d in d_x:
        head = margin + (d_x_max - d) // 2
        end = 2 * margin + d_x_max - d - head
        pads_x.append((head, end))
    return AlignmentPlan(d_t=d_t, d_x=d_x, pads_t=(pad_t, pad_t),
                         pads_x=tuple(pads_x))


def align_A1(encodings: Sequence[Tensor], plan: AlignmentPlan) -> Tensor:
    """Zero-pad per-region (B, C, T, X_e) tensors and stack to (B, C, E, T', X')."""
    for e, enc in enumerate(encodings):
        enc = wrap(enc)
        if enc.data.shape[-2] != plan.d_t or enc.data.shape[-1] != plan.d_x[e]:
            raise ValueError(
                f"region {e}: extents {enc.data.shape[-2:]} do not match plan "
                f"({plan.d_t}, {plan.d_x[e]})"
            )
    return ad.align_join([wrap(e) for e in encodings], plan.pads_t, plan.pads_x)


def unalign_A2(joined: Tensor, plan: AlignmentPlan) -> list[Tensor]:
    """Drop the padding and split the region axis back into per-region tensors."""
    joined = wrap(joined)
    expected = (len(plan.d_x), plan.d_t_aligned, plan.d_x_aligned)
    if joined.data.shape[-3:] != expected:
        raise ValueError(f"joined extents {joined.data.shape[-3:]} do not match plan {expected}")
    return [ad.extract_region(joined, e, plan.pads_t, plan.pads_x[e],
                              plan.d_t, plan.d_x[e])
            for e in range(len(plan.d_x))]


# --- parameter plans -----------------------------------------------------------

def build_variant(config: PcnoConfig) -> dict[str, tuple[tuple[int, ...], np.dtype]]:
    """Exact tensor shapes (and dtypes) of every parameter of the variant."""
    w, e = config.width, config.n_regions
    zt, zx, ze = config.z_t, config.z_x, config.z_e
    c16 = np.dtype(np.complex128)
    f8 = np.dtype(np.float64)

    shapes: dict[str, tuple[tuple[int, ...], np.dtype]] = {
        "lift.W": ((w, config.d_in), f8),
        "lift.b": ((w,), f8),
    }
    for l in range(config.layers):
        shapes[f"layer{l}.W"] = ((w, w), f8)
        shapes[f"layer{l}.b"] = ((w,), f8)
        if config.variant == "pcno":
            shapes[f"layer{l}.K1.low"] = ((zt, zx, e, e), c16)
            shapes[f"layer{l}.K1.high"] = ((zt, zx, e, e), c16)
            shapes[f"layer{l}.K2.low"] = ((w, w, e), c16)
            shapes[f"layer{l}.K2.high"] = ((w, w, e), c16)
        elif config.variant == "pcno-c":
            shapes[f"layer{l}.K1.low"] = ((zt, zx, e, e), c16)
            shapes[f"layer{l}.K1.high"] = ((zt, zx, e, e), c16)
            shapes[f"layer{l}.K2.low"] = ((w, w), c16)
            shapes[f"layer{l}.K2.high"] = ((w, w), c16)
        elif config.variant == "pcno-3d":
            shapes[f"layer{l}.K.low"] = ((w, w, ze, zt, zx), c16)
            shapes[f"layer{l}.K.high"] = ((w, w, ze, zt, zx), c16)
        elif config.variant == "fno-3d":
            for tag in ("tl_xl", "th_xl", "tl_xh", "th_xh"):
                shapes[f"layer{l}.K.{tag}"] = ((w, w, ze, zt, zx), c16)
        elif config.variant == "fno-2d":
            for r in range(e):
                shapes[f"layer{l}.K.r{r}"] = ((w, w, 2 * zt, zx), c16)
    shapes["proj.W1"] = ((config.proj_width, w), f8)
    shapes["proj.b1"] = ((config.proj_width,), f8)
    shapes["proj.W2"] = ((config.d_out, config.proj_width), f8)
    shapes["proj.b2"] = ((config.d_out,), f8)
    return shapes


def param_count(config: PcnoConfig) -> int:
    """Number of trainable real scalars (complex entries count twice)."""
    total = 0
    for shape, dtype in build_variant(config).values():
        n = int(np.prod(shape))
        total += 2 * n if dtype == np.complex128 else n
    return total


@dataclass
class ModelParams:
    config: PcnoConfig
    tensors: dict[str, Tensor]

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def as_mapping(self) -> dict[str, Tensor]:
        return self.tensors

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.tensors.items()}

    def copy(self) -> "ModelParams":
        return ModelParams(
            config=self.config,
            tensors={k: Tensor(v.data.copy(), requires_grad=True)
                     for k, v in self.tensors.items()},
        )


def init_params(config: PcnoConfig, seed: int) -> ModelParams:
    """Seeded initialization: uniform 1/sqrt(fan_in) for the real maps, zero
    biases, and uniform +-1/(fan_in * n_regions) for complex spectral weights."""
    rng = np.random.default_rng(seed)
    tensors: dict[str, Tensor] = {}
    for name, (shape, dtype) in build_variant(config).items():
        if dtype == np.complex128:
            if ".K1." in name:
                scale = 1.0 / (config.n_regions * config.n_regions)
            else:
                scale = 1.0 / (config.width * config.n_regions)
            re = rng.uniform(-scale, scale, size=shape)
            im = rng.uniform(-scale, scale, size=shape)
            data = re + 1j * im
        elif name.endswith(".b") or name.endswith(".b1") or name.endswith(".b2"):
            data = np.zeros(shape)
        else:
            bound = 1.0 / math.sqrt(shape[1])
            data = rng.uniform(-bound, bound, size=shape)
        tensors[name] = Tensor(np.ascontiguousarray(data), requires_grad=True)
    return ModelParams(config=config, tensors=tensors)


# --- forward pass ----------------------------------------------------------------

def _spectral_joint(v: Tensor, params: ModelParams, l: int, use_fft: bool) -> Tensor:
    """pcno / pcno-c spectral branch on the aligned (B, C, E, T', X') tensor."""
    config = params.config
    zt, zx = config.z_t, config.z_x
    d_t, d_x = v.data.shape[-2], v.data.shape[-1]
    shared = config.variant == "pcno-c"

    if use_fft:
        F = ad.rfft_tx(v)
        blocks = ad.truncate_modes(F, zt, zx)
        low, high = blocks.low, blocks.high
    else:
        stacked = ad.dft_truncated(v, zt, zx)
        low = stacked[..., :zt, :]
        high = stacked[..., zt:, :]

    out_bands = []
    for band, block in (("low", low), ("high", high)):
        mixed = ad.region_mix(block, params[f"layer{l}.K1.{band}"])
        if shared:
            mixed = ad.channel_mix_shared(mixed, params[f"layer{l}.K2.{band}"])
        else:
            mixed = ad.channel_mix(mixed, params[f"layer{l}.K2.{band}"])
        out_bands.append(mixed)

    if use_fft:
        from .autodiff import ModeBlocks
        F2 = ad.untruncate(ModeBlocks(low=out_bands[0], high=out_bands[1]),
                           d_t, d_x // 2 + 1)
        return ad.irfft_tx(F2, d_t, d_x)
    merged = ad.concat(out_bands, axis=-2)
    return ad.idft_truncated(merged, d_t, d_x)


def _spectral_3d(v: Tensor, params: ModelParams, l: int) -> Tensor:
    """pcno-3d / fno-3d spectral branch: transform over (region, time, space)."""
    config = params.config
    zt, zx, ze = config.z_t, config.z_x, config.z_e
    B, C, E, d_t, d_x = v.data.shape
    k_x = d_x // 2 + 1
    if 2 * zt > d_t or zx > k_x:
        raise ValueError("mode cutoffs exceed the aligned spectrum")
    F = ad.fft_region(ad.rfft_tx(v))            # (B, C, E, T', Kx) complex

    spectrum_shape = (B, params[f"layer{l}.W"].data.shape[0], E, d_t, k_x)
    sl_e = slice(0, ze)
    keys = {
        "tl_xl": (slice(None), slice(None), sl_e, slice(0, zt), slice(0, zx)),
        "th_xl": (slice(None), slice(None), sl_e, slice(d_t - zt, None), slice(0, zx)),
    }
    if config.variant == "fno-3d":
        if 2 * zx > k_x:
            raise ValueError("fno-3d needs 2*z_x <= d_x//2 + 1")
        keys["tl_xh"] = (slice(None), slice(None), sl_e, slice(0, zt),
                         slice(k_x - zx, None))
        keys["th_xh"] = (slice(None), slice(None), sl_e, slice(d_t - zt, None),
                         slice(k_x - zx, None))
        names = {tag: f"layer{l}.K.{tag}" for tag in keys}
    else:
        names = {"tl_xl": f"layer{l}.K.low", "th_xl": f"layer{l}.K.high"}

    mixed_spectrum = None
    for tag, key in keys.items():
        block = F[key]
        mixed = ad.mode_channel_mix(block, params[names[tag]])
        placed = ad.embed(mixed, key, spectrum_shape)
        mixed_spectrum = placed if mixed_spectrum is None else mixed_spectrum + placed
    return ad.irfft_tx(ad.ifft_region(mixed_spectrum), d_t, d_x)


def _spectral_per_region(v_e: Tensor, params: ModelParams, l: int, e: int,
                         use_fft: bool) -> Tensor:
    """fno-2d spectral branch on one region's (B, C, T, X_e) tensor."""
    config = params.config
    zt, zx = config.z_t, config.z_x
    d_t, d_x = v_e.data.shape[-2], v_e.data.shape[-1]
    if use_fft:
        F = ad.rfft_tx(v_e)
        blocks = ad.truncate_modes(F, zt, zx)
        stacked = ad.concat([blocks.low, blocks.high], axis=-2)
    else:
        stacked = ad.dft_truncated(v_e, zt, zx)
    mixed = ad.mode_channel_mix(stacked, params[f"layer{l}.K.r{e}"])
    return ad.idft_truncated(mixed, d_t, d_x)


def _layer_joined(v: Tensor, params: ModelParams, l: int, last: bool,
                  use_fft: bool) -> Tensor:
    config = params.config
    if config.variant in ("pcno", "pcno-c"):
        spec = _spectral_joint(v, params, l, use_fft)
    else:
        spec = _spectral_3d(v, params, l)
    out = ad.pointwise_linear(v, params[f"layer{l}.W"], params[f"layer{l}.b"]) + spec
    return out if last else ad.gelu(out)


def forward(params: ModelParams, encodings: Sequence, norm: NormStats | None = None,
            use_fft: bool = False) -> list[tuple[Tensor, Tensor]]:
    """Evaluate the operator on one batch.

    encodings: per region, array or Tensor of shape (B, d_in, d_t, d_x_e),
    already normalized.  Returns per region a (flow, pressure) pair of
    (B, d_t, d_x_e) tensors; if ``norm`` is given the pair is mapped back to
    physical units, otherwise the raw normalized channels are returned.
    """
    config = params.config
    encs = [wrap(e) for e in encodings]
    if len(encs) != config.n_regions:
        raise ValueError(f"expected {config.n_regions} regions, got {len(encs)}")
    d_t = encs[0].data.shape[-2]
    for enc in encs:
        if enc.data.shape[1] != config.d_in:
            raise ValueError(f"expected {config.d_in} input channels, got {enc.data.shape[1]}")
        if enc.data.shape[-2] != d_t:
            raise ValueError("all regions must share the temporal extent")

    lifted = [ad.pointwise_linear(enc, params["lift.W"], params["lift.b"])
              for enc in encs]

    if config.variant == "fno-2d":
        # No alignment; regions are convolved independently with their own
        # spectral weights (the pointwise maps are shared).
        per_region = lifted
        for l in range(config.layers):
            last = l == config.layers - 1
            nxt = []
            for e, v_e in enumerate(per_region):
                spec = _spectral_per_region(v_e, params, l, e, use_fft)
                out = ad.pointwise_linear(v_e, params[f"layer{l}.W"],
                                          params[f"layer{l}.b"]) + spec
                nxt.append(out if last else ad.gelu(out))
            per_region = nxt
    else:
        plan = plan_alignment(d_t, [enc.data.shape[-1] for enc in encs],
                              config.r_t, config.r_x)
        v = align_A1(lifted, plan)
        for l in range(config.layers):
            v = _layer_joined(v, params, l, last=l == config.layers - 1,
                              use_fft=use_fft)
        per_region = unalign_A2(v, plan)

    outputs: list[tuple[Tensor, Tensor]] = []
    for u_e in per_region:
        h = ad.gelu(ad.pointwise_linear(u_e, params["proj.W1"], params["proj.b1"]))
        y = ad.pointwise_linear(h, params["proj.W2"], params["proj.b2"])
        m = y[:, 0]
        p = y[:, 1]
        if norm is not None:
            m = m * norm.output_std[0] + norm.output_mean[0]
            p = p * norm.output_std[1] + norm.output_mean[1]
        outputs.append((m, p))
    return outputs
