"""Multi-pathway voxel classification network.

One pathway per input feature: the 3D patch runs through a 3D conv+pool
stack, the three orthogonal patches share a single 2D conv+pool parameter
block (one more shared block for the three downscaled patches), and the
centroid distances feed the merge point directly (optionally through a
small fully-connected pre-layer).  Pathway outputs are concatenated and
classified by a fully-connected stack with a softmax output of width N.

Pooling follows every convolution; odd spatial sides are cropped by their
trailing row/column so the pool side divides evenly.
"""

from __future__ import annotations

import io
import os
from dataclasses import dataclass, field

import numpy as np

from .features import FeatureConfig, FeatureLayout, FeatureVector
from .layers import (
    ConvLayer,
    FullLayer,
    GradientTape,
    conv2d_backward,
    conv2d_forward,
    conv3d_backward,
    conv3d_forward,
    crop_trailing,
    crop_trailing_backward,
    full_backward,
    full_forward,
    maxpool2d_backward,
    maxpool2d_forward,
    maxpool3d_backward,
    maxpool3d_forward,
    relu_backward,
    relu_forward,
    softmax,
)

MODEL_MAGIC = "vsegmodel 1"


class ModelFormatError(ValueError):
    """Raised when a model file cannot be decoded."""


@dataclass(frozen=True)
class NetworkConfig:
    features: FeatureConfig = field(default_factory=FeatureConfig)
    t: int = 5
    p: int = 2
    maps3d: tuple[int, ...] = (8,)
    maps_ortho: tuple[int, ...] = (12,)
    maps_down: tuple[int, ...] = (12,)
    hidden: tuple[int, ...] = (128,)
    centroid_hidden: int | None = None
    use_patch3d: bool = True
    n_ortho: int = 3
    use_downscaled: bool = True

    def __post_init__(self):
        object.__setattr__(self, "maps3d", tuple(self.maps3d))
        object.__setattr__(self, "maps_ortho", tuple(self.maps_ortho))
        object.__setattr__(self, "maps_down", tuple(self.maps_down))
        object.__setattr__(self, "hidden", tuple(self.hidden))
        if self.t < 1 or self.p < 1:
            raise ValueError("kernel side t and pool side p must be positive")
        if self.n_ortho not in (0, 1, 3):
            raise ValueError(f"n_ortho must be 0, 1 or 3, got {self.n_ortho}")
        if not (self.use_patch3d or self.n_ortho or self.use_downscaled):
            raise ValueError("at least one intensity pathway must be enabled")
        # raises on an inconsistent shape chain
        if self.use_patch3d:
            _chain_side(self.features.a, self.maps3d, self.t, self.p, "3D patch")
        if self.n_ortho:
            _chain_side(self.features.b, self.maps_ortho, self.t, self.p, "2D patch")
        if self.use_downscaled:
            _chain_side(self.features.c, self.maps_down, self.t, self.p, "downscaled patch")

    @property
    def sigma(self) -> float:
        """Centroid-distance noise level used during training."""
        return self.features.noise_sigma

    @property
    def n_regions(self) -> int:
        return self.features.n_regions


def _chain_side(side: int, maps: tuple[int, ...], t: int, p: int, what: str) -> int:
    """Spatial side after the conv+pool chain; raises if it collapses."""
    if not maps:
        raise ValueError(f"{what} pathway enabled but has no conv blocks")
    for _ in maps:
        side = side - t + 1
        if side < 1:
            raise ValueError(f"{what} side shrinks below 1 after a {t}-kernel conv")
        side -= side % p
        if side < p:
            raise ValueError(f"{what} side {side} too small for pool p={p}")
        side //= p
    return side


@dataclass
class _Pathway:
    kind: str                   # "conv" or "direct"
    in_width: int
    in_shape: tuple[int, ...]   # spatial reshape for conv pathways
    steps: list | None
    out_width: int
    pre_name: str | None = None  # optional dense pre-layer (centroid pathway)


def _conv_steps(prefix: str, side: int, nd: int, maps: tuple[int, ...], t: int, p: int):
    steps, in_maps = [], 1
    for i, m in enumerate(maps):
        steps.append(("conv", f"{prefix}_conv{i}", nd, in_maps, m))
        steps.append(("relu",))
        side = side - t + 1
        keep = side - side % p
        if keep != side:
            steps.append(("crop", (keep,) * nd))
        steps.append(("pool", p, nd))
        side = keep // p
        in_maps = m
    return steps, side, in_maps


def _build_pathways(config: NetworkConfig, with_centroid: bool):
    f = config.features
    pathways: list[_Pathway] = []
    if config.use_patch3d:
        steps, side, m = _conv_steps("p3d", f.a, 3, config.maps3d, config.t, config.p)
        pathways.append(_Pathway("conv", f.a**3, (f.a,) * 3, steps, m * side**3))
    if config.n_ortho:
        steps, side, m = _conv_steps("ortho", f.b, 2, config.maps_ortho, config.t, config.p)
        for _ in range(config.n_ortho):
            pathways.append(_Pathway("conv", f.b**2, (f.b,) * 2, steps, m * side**2))
    if config.use_downscaled:
        steps, side, m = _conv_steps("down", f.c, 2, config.maps_down, config.t, config.p)
        for _ in range(3):
            pathways.append(_Pathway("conv", f.c**2, (f.c,) * 2, steps, m * side**2))
    if with_centroid:
        if config.centroid_hidden:
            pathways.append(
                _Pathway("direct", f.n_regions, (), None, config.centroid_hidden, "cpre")
            )
        else:
            pathways.append(_Pathway("direct", f.n_regions, (), None, f.n_regions))
    return pathways


def _param_specs(config: NetworkConfig, with_centroid: bool):
    """Ordered (name, shape) for every parameter block, shared blocks once."""
    f, t = config.features, config.t
    specs: list[tuple[str, tuple[int, ...]]] = []

    def conv_stack(prefix, maps, nd):
        in_maps = 1
        for i, m in enumerate(maps):
            specs.append((f"{prefix}_conv{i}_w", (m, in_maps) + (t,) * nd))
            specs.append((f"{prefix}_conv{i}_b", (m,)))
            in_maps = m

    if config.use_patch3d:
        conv_stack("p3d", config.maps3d, 3)
    if config.n_ortho:
        conv_stack("ortho", config.maps_ortho, 2)
    if config.use_downscaled:
        conv_stack("down", config.maps_down, 2)
    if with_centroid and config.centroid_hidden:
        specs.append(("cpre_w", (config.centroid_hidden, f.n_regions)))
        specs.append(("cpre_b", (config.centroid_hidden,)))

    merge = sum(pw.out_width for pw in _build_pathways(config, with_centroid))
    width = merge
    for i, h in enumerate(config.hidden):
        specs.append((f"fc{i}_w", (h, width)))
        specs.append((f"fc{i}_b", (h,)))
        width = h
    specs.append(("out_w", (f.n_regions, width)))
    specs.append(("out_b", (f.n_regions,)))
    return specs


def param_count(config: NetworkConfig, with_centroid_pathway: bool = True) -> int:
    """Total parameter scalars; cross-orientation shared blocks count once."""
    return sum(
        int(np.prod(shape)) for _, shape in _param_specs(config, with_centroid_pathway)
    )


def _glorot_init(specs, rng, dtype):
    params = {}
    for name, shape in specs:
        if name.endswith("_b"):
            params[name] = np.zeros(shape, dtype=dtype)
            continue
        if len(shape) == 2:
            fan_in, fan_out = shape[1], shape[0]
        else:
            recep = int(np.prod(shape[2:]))
            fan_in, fan_out = shape[1] * recep, shape[0] * recep
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        params[name] = rng.uniform(-limit, limit, size=shape).astype(dtype)
    return params


class NetworkModel:
    """Layer stack plus its parameter store; built by :func:`build`."""

    def __init__(self, config: NetworkConfig, with_centroid_pathway: bool, params: dict):
        self.config = config
        self.with_centroid_pathway = with_centroid_pathway
        self.params = params
        self.layout = FeatureLayout(config.features)
        self.pathways = _build_pathways(config, with_centroid_pathway)
        self.input_width = sum(pw.in_width for pw in self.pathways)
        self._input_columns = self._column_index()

    def _column_index(self) -> np.ndarray:
        lay, cfg = self.layout, self.config
        cols: list[np.ndarray] = []
        if cfg.use_patch3d:
            cols.append(np.arange(lay.patch3d.start, lay.patch3d.stop))
        if cfg.n_ortho == 1:
            cols.append(np.arange(lay.ortho[2].start, lay.ortho[2].stop))  # transverse
        elif cfg.n_ortho == 3:
            cols.append(np.arange(lay.ortho[0].start, lay.ortho[2].stop))
        if cfg.use_downscaled:
            cols.append(np.arange(lay.down[0].start, lay.down[2].stop))
        if self.with_centroid_pathway:
            cols.append(np.arange(lay.cdist.start, lay.cdist.stop))
        return np.concatenate(cols)

    @property
    def n_regions(self) -> int:
        return self.config.n_regions

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    @property
    def depth(self) -> int:
        """Parameterized layers along the deepest input-to-output path."""
        per_pathway = max(
            (len(cfg_maps) for cfg_maps, on in (
                (self.config.maps3d, self.config.use_patch3d),
                (self.config.maps_ortho, self.config.n_ortho > 0),
                (self.config.maps_down, self.config.use_downscaled),
            ) if on),
            default=0,
        )
        return per_pathway + len(self.config.hidden) + 1

    def select_input(self, x: np.ndarray) -> np.ndarray:
        """Map a full feature matrix (or an already-selected one) to the
        pathway input columns of this model."""
        width = x.shape[-1]
        if width == self.input_width:
            return x
        if width == self.layout.length:
            return x[..., self._input_columns]
        raise ValueError(
            f"feature width {width} matches neither the model input "
            f"({self.input_width}) nor the full layout ({self.layout.length})"
        )

    # -- forward / backward -------------------------------------------------

    def _pathway_forward(self, pw: _Pathway, x: np.ndarray):
        if pw.kind == "direct":
            if pw.pre_name is None:
                return x, None
            layer = FullLayer(self.params[pw.pre_name + "_w"], self.params[pw.pre_name + "_b"])
            pre = full_forward(x, layer)
            return relu_forward(pre), ("cpre", x, pre)
        caches = []
        h = x.reshape((x.shape[0], 1) + pw.in_shape)
        for step in pw.steps:
            if step[0] == "conv":
                _, name, nd, _, _ = step
                layer = ConvLayer(self.params[name + "_w"], self.params[name + "_b"])
                caches.append(("conv", name, nd, h))
                h = (conv2d_forward if nd == 2 else conv3d_forward)(h, layer)
            elif step[0] == "relu":
                caches.append(("relu", h))
                h = relu_forward(h)
            elif step[0] == "crop":
                caches.append(("crop", h.shape[2:]))
                h = crop_trailing(h, step[1])
            else:  # pool
                _, p, nd = step
                h, arg = (maxpool2d_forward if nd == 2 else maxpool3d_forward)(h, p)
                caches.append(("pool", arg, p, nd))
        return h.reshape(x.shape[0], -1), (caches, h.shape)

    def _pathway_backward(self, pw: _Pathway, cache, d_flat, tape: GradientTape):
        if pw.kind == "direct":
            if pw.pre_name is None:
                return
            _, x, pre = cache
            d_pre = relu_backward(pre, d_flat)
            layer = FullLayer(self.params[pw.pre_name + "_w"], self.params[pw.pre_name + "_b"])
            _, dw, db = full_backward(x, layer, d_pre)
            tape.accumulate(pw.pre_name + "_w", dw)
            tape.accumulate(pw.pre_name + "_b", db)
            return
        caches, out_shape = cache
        d = d_flat.reshape(out_shape)
        for step in reversed(caches):
            if step[0] == "conv":
                _, name, nd, x_in = step
                layer = ConvLayer(self.params[name + "_w"], self.params[name + "_b"])
                d, dw, db = (conv2d_backward if nd == 2 else conv3d_backward)(x_in, layer, d)
                tape.accumulate(name + "_w", dw)
                tape.accumulate(name + "_b", db)
            elif step[0] == "relu":
                d = relu_backward(step[1], d)
            elif step[0] == "crop":
                d = crop_trailing_backward(d, step[1])
            else:
                _, arg, p, nd = step
                d = (maxpool2d_backward if nd == 2 else maxpool3d_backward)(arg, d, p)

    def forward_logits(self, x: np.ndarray):
        """Logits plus the caches needed for a backward pass."""
        x = self.select_input(np.atleast_2d(np.asarray(x, dtype=self.dtype)))
        parts, pcaches = [], []
        off = 0
        for pw in self.pathways:
            out, cache = self._pathway_forward(pw, x[:, off : off + pw.in_width])
            parts.append(out)
            pcaches.append(cache)
            off += pw.in_width
        merged = np.concatenate(parts, axis=1)
        h, fc_caches = merged, []
        for i in range(len(self.config.hidden)):
            layer = FullLayer(self.params[f"fc{i}_w"], self.params[f"fc{i}_b"])
            fc_caches.append(("fc", f"fc{i}", h))
            h = full_forward(h, layer)
            fc_caches.append(("relu", h))
            h = relu_forward(h)
        fc_caches.append(("fc", "out", h))
        logits = full_forward(h, FullLayer(self.params["out_w"], self.params["out_b"]))
        return logits, (pcaches, fc_caches, [p.shape[1] for p in parts])

    def backward(self, caches, d_logits: np.ndarray) -> GradientTape:
        """Parameter gradients of ``sum(d_logits * logits)``."""
        pcaches, fc_caches, widths = caches
        tape = GradientTape.for_params(self.params)
        d = d_logits
        for step in reversed(fc_caches):
            if step[0] == "fc":
                _, name, x_in = step
                layer = FullLayer(self.params[name + "_w"], self.params[name + "_b"])
                d, dw, db = full_backward(x_in, layer, d)
                tape.accumulate(name + "_w", dw)
                tape.accumulate(name + "_b", db)
            else:
                d = relu_backward(step[1], d)
        off = 0
        for pw, cache, w in zip(self.pathways, pcaches, widths):
            self._pathway_backward(pw, cache, d[:, off : off + w], tape)
            off += w
        return tape

    def forward_batch(self, x: np.ndarray) -> np.ndarray:
        """Class probabilities, one row per datapoint."""
        logits, _ = self.forward_logits(x)
        return softmax(logits)

    def merged_representation(self, x: np.ndarray):
        """Pathway outputs at the merge point; (matrix, per-part widths)."""
        x = self.select_input(np.atleast_2d(np.asarray(x, dtype=self.dtype)))
        parts, off = [], 0
        for pw in self.pathways:
            out, _ = self._pathway_forward(pw, x[:, off : off + pw.in_width])
            parts.append(out)
            off += pw.in_width
        return np.concatenate(parts, axis=1), [p.shape[1] for p in parts]


def build(
    config: NetworkConfig,
    with_centroid_pathway: bool = True,
    rng: np.random.Generator | int | None = 0,
    dtype=np.float32,
) -> NetworkModel:
    """Fresh model with Glorot-uniform weights and zero biases."""
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    params = _glorot_init(_param_specs(config, with_centroid_pathway), rng, dtype)
    return NetworkModel(config, with_centroid_pathway, params)


def forward(model: NetworkModel, fv) -> np.ndarray:
    """Probabilities for one datapoint (FeatureVector or flat array)."""
    if isinstance(fv, FeatureVector):
        fv = fv.flatten()
    fv = np.asarray(fv)
    if fv.ndim != 1:
        raise ValueError("forward() takes a single datapoint; use forward_batch")
    return model.forward_batch(fv[None])[0]


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

_LIST_KEYS = ("maps3d", "maps_ortho", "maps_down", "hidden")


def _config_lines(config: NetworkConfig, with_centroid: bool) -> list[str]:
    f = config.features
    lines = [
        f"a {f.a}", f"b {f.b}", f"c {f.c}", f"s {f.s}",
        f"n_regions {f.n_regions}", f"noise_sigma {f.noise_sigma!r}",
        f"t {config.t}", f"p {config.p}",
    ]
    for key in _LIST_KEYS:
        lines.append(f"{key} {','.join(str(v) for v in getattr(config, key))}")
    lines.append(f"centroid_hidden {config.centroid_hidden if config.centroid_hidden else 'none'}")
    lines.append(f"use_patch3d {int(config.use_patch3d)}")
    lines.append(f"n_ortho {config.n_ortho}")
    lines.append(f"use_downscaled {int(config.use_downscaled)}")
    lines.append(f"with_centroid_pathway {int(with_centroid)}")
    return lines


def _parse_config(kv: dict) -> tuple[NetworkConfig, bool]:
    try:
        features = FeatureConfig(
            a=int(kv.pop("a")), b=int(kv.pop("b")), c=int(kv.pop("c")),
            s=int(kv.pop("s")), n_regions=int(kv.pop("n_regions")),
            noise_sigma=float(kv.pop("noise_sigma")),
        )
        lists = {k: tuple(int(v) for v in kv.pop(k).split(",") if v) for k in _LIST_KEYS}
        ch = kv.pop("centroid_hidden")
        config = NetworkConfig(
            features=features, t=int(kv.pop("t")), p=int(kv.pop("p")),
            centroid_hidden=None if ch == "none" else int(ch),
            use_patch3d=bool(int(kv.pop("use_patch3d"))),
            n_ortho=int(kv.pop("n_ortho")),
            use_downscaled=bool(int(kv.pop("use_downscaled"))),
            **lists,
        )
        with_centroid = bool(int(kv.pop("with_centroid_pathway")))
    except KeyError as exc:
        raise ModelFormatError(f"model manifest missing key {exc}") from exc
    return config, with_centroid


def save_model(model: NetworkModel, path) -> None:
    """Text manifest plus concatenated little-endian float32 blocks."""
    buf = io.StringIO()
    buf.write(MODEL_MAGIC + "\n")
    for line in _config_lines(model.config, model.with_centroid_pathway):
        buf.write(line + "\n")
    for name, arr in model.params.items():
        buf.write(f"param {name} {' '.join(str(d) for d in arr.shape)}\n")
    buf.write("end\n")
    tmp = f"{path}.tmp{os.getpid()}"
    with open(tmp, "wb") as fh:
        fh.write(buf.getvalue().encode("ascii"))
        for arr in model.params.values():
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    os.replace(tmp, path)


def load_model(path) -> NetworkModel:
    with open(path, "rb") as fh:
        lines = []
        while True:
            line = fh.readline(4096).decode("ascii", errors="replace")
            if not line.endswith("\n"):
                raise ModelFormatError(f"{path}: truncated manifest")
            line = line.rstrip("\n")
            if line == "end":
                break
            lines.append(line)
        if not lines or lines[0] != MODEL_MAGIC:
            raise ModelFormatError(f"{path}: bad magic {lines[:1]!r}")
        kv, specs = {}, []
        for line in lines[1:]:
            key, _, value = line.partition(" ")
            if key == "param":
                name, *shape = value.split()
                specs.append((name, tuple(int(d) for d in shape)))
            else:
                if key in kv:
                    raise ModelFormatError(f"{path}: duplicate manifest key {key!r}")
                kv[key] = value
        config, with_centroid = _parse_config(kv)
        if kv:
            raise ModelFormatError(f"{path}: unknown manifest keys {sorted(kv)}")
        expected = _param_specs(config, with_centroid)
        if specs != expected:
            raise ModelFormatError(f"{path}: parameter table does not match config")
        params = {}
        for name, shape in specs:
            count = int(np.prod(shape))
            raw = fh.read(4 * count)
            if len(raw) != 4 * count:
                raise ModelFormatError(f"{path}: truncated parameter block {name!r}")
            params[name] = np.frombuffer(raw, dtype="<f4").reshape(shape).copy()
        if fh.read(1):
            raise ModelFormatError(f"{path}: trailing bytes after parameter blocks")
    return NetworkModel(config, with_centroid, params)
