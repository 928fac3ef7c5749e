"""Flow network: twin encoders, event-image fusion, all-pairs pyramid
correlation with windowed lookup, and the recurrent residual flow updater.

Layout and conventions
  - Features live at 1/8 resolution: each encoder is six residual blocks,
    three of which downsample with stride-2 convolutions.
  - Correlation level k holds C^k(x, y) shaped (h, w, h/2^k, w/2^k); levels
    1..3 are 2x2 average poolings of level 0 over the target coordinates.
  - Lookup samples level k at (x + F(x))/2^k + delta for integer offsets
    delta in [-r, r]^2, zero outside the grid. Output channels are ordered
    level-major, then row-major over (dy, dx); this order is part of the
    checkpoint contract.
  - Recorded flows are upsampled x8 bilinearly and multiplied by 8 so values
    are in full-resolution pixels.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from . import tensorops as T
from .events import EventVolume
from .evalviz import FlowField
from .tensorops import Tensor

_CKPT_MAGIC = b"DCEI"
_CKPT_VERSION = 1
_CONFIG_KEY = "__config__"
_FUSION_IDS = {"add": 0, "conv": 1}
_FUSION_NAMES = {v: k for k, v in _FUSION_IDS.items()}


@dataclass(frozen=True)
class ModelConfig:
    feature_channels: int = 32
    gru_hidden: int = 64
    iterations: int = 6
    lookup_radius: int = 3
    fusion_variant: str = "conv"
    event_bins: int = 5
    pyramid_levels: int = 4
    downsample: int = 8

    def __post_init__(self):
        if self.feature_channels < 8 or self.feature_channels % 4:
            raise ValueError("feature_channels must be >= 8 and divisible by 4")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.lookup_radius < 1:
            raise ValueError("lookup_radius must be >= 1")
        if self.gru_hidden < 1:
            raise ValueError("gru_hidden must be >= 1")
        if self.event_bins < 1:
            raise ValueError("event_bins must be >= 1")
        if self.fusion_variant not in _FUSION_IDS:
            raise ValueError(f"unknown fusion variant: {self.fusion_variant!r}")
        if self.pyramid_levels != 4 or self.downsample != 8:
            raise ValueError("pyramid_levels is fixed at 4 and downsample at 8")


@dataclass
class CorrelationPyramid:
    levels: list  # level k: Tensor (h, w, h/2^k, w/2^k)
    base_h: int
    base_w: int


@dataclass
class ForwardResult:
    """All N per-iteration flows (full resolution) plus the features the
    training losses need."""

    flows: list  # N tensors (2, H, W)
    pseudo_feat: Tensor
    image_feat: Tensor
    event_feat: Tensor

    def fields(self) -> list[FlowField]:
        return [FlowField(f.data[0], f.data[1]) for f in self.flows]

    def final_field(self) -> FlowField:
        return self.fields()[-1]


class Model:
    """Parameter container plus the forward pipeline."""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg
        self.params: dict[str, Tensor] = {}
        self._build(np.random.default_rng(seed))

    # -- parameter construction ------------------------------------------------

    def _add_conv(self, rng, name: str, out_c: int, in_c: int, k: int,
                  gain: float) -> None:
        fan_in = in_c * k * k
        bound = gain * np.sqrt(3.0 / fan_in)
        w = rng.uniform(-bound, bound, size=(out_c, in_c, k, k)).astype(np.float32)
        self.params[f"{name}/w"] = Tensor(w, requires_grad=True)
        self.params[f"{name}/b"] = Tensor(np.zeros(out_c, np.float32), requires_grad=True)

    def _add_encoder(self, rng, prefix: str, in_c: int) -> None:
        c = self.cfg.feature_channels
        plan = [  # (in, out, stride) for six residual blocks, downsampling x8
            (in_c, c // 2, 2), (c // 2, c // 2, 1),
            (c // 2, 3 * c // 4, 2), (3 * c // 4, 3 * c // 4, 1),
            (3 * c // 4, c, 2), (c, c, 1),
        ]
        relu_gain = float(np.sqrt(2.0))
        for i, (ci, co, s) in enumerate(plan):
            base = f"{prefix}/b{i}"
            self._add_conv(rng, f"{base}/conv1", co, ci, 3, relu_gain)
            # Damped second conv keeps the residual stack's variance in check
            # (no normalization layers anywhere in the encoders).
            self._add_conv(rng, f"{base}/conv2", co, co, 3, 0.4)
            if s != 1 or ci != co:
                self._add_conv(rng, f"{base}/sc", co, ci, 1, 1.0)

    def _build(self, rng) -> None:
        cfg = self.cfg
        c, d = cfg.feature_channels, cfg.gru_hidden
        relu_gain = float(np.sqrt(2.0))
        self._add_encoder(rng, "ienc", 3)
        self._add_encoder(rng, "eenc", 2 * cfg.event_bins)
        if cfg.fusion_variant == "conv":
            self._add_conv(rng, "fuse/conv1", c, c, 3, relu_gain)
            self._add_conv(rng, "fuse/conv2", c, c, 3, relu_gain)
            self._add_conv(rng, "fuse/conv3", c, 2 * c, 3, 0.4)
        lk = 4 * (2 * cfg.lookup_radius + 1) ** 2
        self._add_conv(rng, "upd/hid", d, c, 1, 1.0)
        self._add_conv(rng, "upd/motion1", d, lk + 2, 3, relu_gain)
        self._add_conv(rng, "upd/motion2", d, d, 3, relu_gain)
        gru_in = d + d + 2 * c  # hidden + motion + image/event features
        self._add_conv(rng, "upd/gru_z", d, gru_in, 3, 1.0)
        self._add_conv(rng, "upd/gru_r", d, gru_in, 3, 1.0)
        self._add_conv(rng, "upd/gru_q", d, gru_in, 3, 1.0)
        self._add_conv(rng, "upd/flow1", d, d, 3, relu_gain)
        # Full-gain flow head: a damped (0.1) head made iteration 1 start
        # near zero flow but starved the trunk of gradient signal and
        # roughly doubled held-out error at equal step budgets.
        self._add_conv(rng, "upd/flow2", 2, d, 3, 1.0)

    # -- primitive wrappers (CHW tensors, batch dim handled internally) -------

    def _conv(self, x: Tensor, name: str, stride: int = 1, padding: int = 1) -> Tensor:
        c, h, w = x.shape
        out = T.conv2d(x.reshape(1, c, h, w), self.params[f"{name}/w"],
                       self.params[f"{name}/b"], stride=stride, padding=padding)
        _, co, ho, wo = out.shape
        return out.reshape(co, ho, wo)

    def _res_block(self, x: Tensor, base: str, stride: int) -> Tensor:
        y = self._conv(x, f"{base}/conv1", stride=stride).relu()
        y = self._conv(y, f"{base}/conv2")
        sc = x
        if f"{base}/sc/w" in self.params:
            sc = self._conv(x, f"{base}/sc", stride=stride, padding=0)
        return (y + sc).relu()

    def _encode(self, x: Tensor, prefix: str) -> Tensor:
        strides = (2, 1, 2, 1, 2, 1)
        for i, s in enumerate(strides):
            x = self._res_block(x, f"{prefix}/b{i}", s)
        return x

    # -- public pipeline stages --------------------------------------------------

    def encode_image(self, image) -> Tensor:
        img = image if isinstance(image, Tensor) else Tensor(np.asarray(image, np.float32))
        if img.ndim != 3 or img.shape[0] != 3:
            raise ValueError("expected a (3, H, W) image")
        _, h, w = img.shape
        if h % 8 or w % 8:
            raise ValueError("image extent must be divisible by 8")
        return self._encode(img, "ienc")

    def encode_events(self, volume) -> Tensor:
        if isinstance(volume, EventVolume):
            if volume.bins != self.cfg.event_bins:
                raise ValueError(f"volume has {volume.bins} bins, "
                                 f"model expects {self.cfg.event_bins}")
            vol = Tensor(volume.data)
        else:
            vol = volume if isinstance(volume, Tensor) else Tensor(np.asarray(volume, np.float32))
        if vol.ndim != 3 or vol.shape[0] != 2 * self.cfg.event_bins:
            raise ValueError("expected a (2*bins, H, W) event volume")
        _, h, w = vol.shape
        if h % 8 or w % 8:
            raise ValueError("volume extent must be divisible by 8")
        return self._encode(vol, "eenc")

    def fuse(self, image_feat: Tensor, event_feat: Tensor) -> Tensor:
        """Predict the pseudo second-frame feature from image1 + events."""
        if image_feat.shape != event_feat.shape:
            raise ValueError("fusion inputs must share shape")
        if self.cfg.fusion_variant == "add":
            return image_feat + event_feat
        a = self._conv(image_feat, "fuse/conv1").relu()
        b = self._conv(event_feat, "fuse/conv2").relu()
        mixed = self._conv(T.concat([a, b], axis=0), "fuse/conv3")
        return mixed + image_feat

    def build_correlation(self, feat1: Tensor, feat2: Tensor) -> CorrelationPyramid:
        """All-pairs dot products C^0(x, y) plus three pooled levels."""
        if feat1.shape != feat2.shape:
            raise ValueError("correlation inputs must share shape")
        c, h, w = feat1.shape
        halvings = self.cfg.pyramid_levels - 1
        if min(h, w) < (1 << halvings):
            raise ValueError(
                f"feature grid {h}x{w} too small for {self.cfg.pyramid_levels} "
                "pyramid levels")
        f1 = feat1.reshape(c, h * w).transpose()  # (hw, C)
        f2 = feat2.reshape(c, h * w)  # (C, hw)
        c0 = T.matmul(f1, f2).reshape(h, w, h, w)
        levels = [c0]
        for _ in range(self.cfg.pyramid_levels - 1):
            levels.append(T.avg_pool2(levels[-1]))
        return CorrelationPyramid(levels, h, w)

    def lookup(self, pyr: CorrelationPyramid, flow: Tensor,
               radius: int | None = None) -> Tensor:
        """Sample every pyramid level around the flow-displaced targets.

        Returns (4*(2r+1)^2, h, w); channels run level-major, then row-major
        over the (dy, dx) offset window.
        """
        r = self.cfg.lookup_radius if radius is None else int(radius)
        h, w = pyr.base_h, pyr.base_w
        if flow.shape != (2, h, w):
            raise ValueError("flow must be (2, h, w) at feature resolution")
        dt = flow.dtype
        gx = np.broadcast_to(np.arange(w, dtype=dt), (h, w))
        gy = np.broadcast_to(np.arange(h, dtype=dt)[:, None], (h, w))
        fu, fv = T.split(flow, [1, 1], axis=0)
        tx = (fu.reshape(h, w) + gx).reshape(h * w, 1, 1, 1)
        ty = (fv.reshape(h, w) + gy).reshape(h * w, 1, 1, 1)
        side = 2 * r + 1
        offs = np.arange(-r, r + 1, dtype=dt)
        dx = np.broadcast_to(offs, (1, 1, side, side))
        dy = np.broadcast_to(offs[:, None], (side, side)).reshape(1, 1, side, side)
        blocks = []
        for k, level in enumerate(pyr.levels):
            scale = dt.type(1.0 / (1 << k))
            cx = tx * scale + dx
            cy = ty * scale + dy
            coords = T.concat([cx, cy], axis=1)  # (hw, 2, side, side)
            hk, wk = level.shape[2], level.shape[3]
            sampled = T.grid_sample(level.reshape(h * w, 1, hk, wk), coords)
            blocks.append(
                sampled.reshape(h * w, side * side).transpose().reshape(side * side, h, w)
            )
        return T.concat(blocks, axis=0)

    def init_hidden(self, image_feat: Tensor) -> Tensor:
        return self._conv(image_feat, "upd/hid", padding=0).tanh()

    def update_step(self, hidden: Tensor, lookup_feats: Tensor, flow: Tensor,
                    image_feat: Tensor, event_feat: Tensor) -> tuple[Tensor, Tensor]:
        """One recurrent refinement: returns (hidden', delta_flow)."""
        expected_lk = 4 * (2 * self.cfg.lookup_radius + 1) ** 2
        if lookup_feats.shape[0] != expected_lk:
            raise ValueError("lookup feature channels do not match the radius")
        if hidden.shape[0] != self.cfg.gru_hidden:
            raise ValueError("hidden state width mismatch")
        m = self._conv(T.concat([lookup_feats, flow], axis=0), "upd/motion1").relu()
        m = self._conv(m, "upd/motion2").relu()
        x = T.concat([m, image_feat, event_feat], axis=0)
        hx = T.concat([hidden, x], axis=0)
        z = self._conv(hx, "upd/gru_z").sigmoid()
        rr = self._conv(hx, "upd/gru_r").sigmoid()
        q = self._conv(T.concat([rr * hidden, x], axis=0), "upd/gru_q").tanh()
        hidden_new = (1.0 - z) * hidden + z * q
        f = self._conv(hidden_new, "upd/flow1").relu()
        dflow = self._conv(f, "upd/flow2")
        return hidden_new, dflow

    def forward(self, image1, volume) -> ForwardResult:
        """Run the full pipeline; records all N upsampled iterate flows."""
        img = image1 if isinstance(image1, Tensor) else Tensor(np.asarray(image1, np.float32))
        f_img = self.encode_image(img)
        f_evt = self.encode_events(volume)
        if f_img.shape != f_evt.shape:
            raise ValueError("image and event volume extents differ")
        h, w = f_img.shape[1], f_img.shape[2]
        if min(h, w) < 8:
            raise ValueError("inputs must be at least 64x64 for the 4-level pyramid")
        pseudo = self.fuse(f_img, f_evt)
        pyr = self.build_correlation(f_img, pseudo)
        hidden = self.init_hidden(f_img)
        flow = Tensor(np.zeros((2, h, w), np.float32))
        flows: list[Tensor] = []
        for _ in range(self.cfg.iterations):
            feats = self.lookup(pyr, flow)
            hidden, dflow = self.update_step(hidden, feats, flow, f_img, f_evt)
            flow = flow + dflow
            up = T.upsample_bilinear(flow.reshape(1, 2, h, w), 8) * 8.0
            flows.append(up.reshape(2, 8 * h, 8 * w))
        return ForwardResult(flows, pseudo, f_img, f_evt)

    def predict(self, image1, volume) -> FlowField:
        return self.forward(image1, volume).final_field()


# -- reference implementation for cross-checks -------------------------------------


def local_correlation_reference(f1: np.ndarray, f2: np.ndarray,
                                flow: np.ndarray, radius: int) -> np.ndarray:
    """Warped local correlation: for each source pixel x and offset delta,
    bilinearly sample f2 at x + F(x) + delta (zero outside) and dot with
    f1(x). Returns ((2r+1)^2, h, w), offsets row-major. Plain numpy loops;
    oracle for the level-0 lookup path."""
    c, h, w = f1.shape
    side = 2 * radius + 1
    out = np.zeros((side * side, h, w), dtype=np.float64)
    f1 = f1.astype(np.float64)
    f2 = f2.astype(np.float64)

    def sample(ch: int, py: float, px: float) -> float:
        x0, y0 = int(np.floor(px)), int(np.floor(py))
        fx, fy = px - x0, py - y0
        total = 0.0
        for yy, wy in ((y0, 1 - fy), (y0 + 1, fy)):
            for xx, wx in ((x0, 1 - fx), (x0 + 1, fx)):
                if 0 <= yy < h and 0 <= xx < w:
                    total += wy * wx * f2[ch, yy, xx]
        return total

    for y in range(h):
        for x in range(w):
            cx = x + float(flow[0, y, x])
            cy = y + float(flow[1, y, x])
            idx = 0
            for dy in range(-radius, radius + 1):
                for dx in range(-radius, radius + 1):
                    acc = 0.0
                    for ch in range(c):
                        acc += f1[ch, y, x] * sample(ch, cy + dy, cx + dx)
                    out[idx, y, x] = acc
                    idx += 1
    return out


# -- checkpoint IO -------------------------------------------------------------


def _config_vector(cfg: ModelConfig) -> np.ndarray:
    return np.array(
        [cfg.feature_channels, cfg.gru_hidden, cfg.iterations,
         cfg.lookup_radius, cfg.event_bins, _FUSION_IDS[cfg.fusion_variant]],
        dtype=np.float32,
    )


def save_checkpoint(path, model: Model) -> None:
    """Binary little-endian layout: magic, version, count, then per entry a
    length-prefixed name, rank, u32 extents, and f32 row-major data. Model
    hyperparameters travel as the pseudo-entry ``__config__``."""
    entries = [(name, p.data) for name, p in sorted(model.params.items())]
    entries.append((_CONFIG_KEY, _config_vector(model.cfg)))
    entries.sort(key=lambda e: e[0])
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<II", _CKPT_VERSION, len(entries)))
        for name, data in entries:
            raw = name.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<B", data.ndim))
            fh.write(struct.pack(f"<{data.ndim}I", *data.shape))
            fh.write(np.ascontiguousarray(data, dtype="<f4").tobytes())


def load_checkpoint(path) -> Model:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != _CKPT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    version, count = struct.unpack("<II", raw[4:12])
    if version != _CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    pos = 12
    entries: dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack("<H", raw[pos : pos + 2])
            pos += 2
            name = raw[pos : pos + nlen].decode("utf-8")
            pos += nlen
            rank = raw[pos]
            pos += 1
            shape = struct.unpack(f"<{rank}I", raw[pos : pos + 4 * rank])
            pos += 4 * rank
            size = int(np.prod(shape)) if rank else 1
            data = np.frombuffer(raw[pos : pos + 4 * size], dtype="<f4")
            if data.size != size:
                raise ValueError("short read")
            pos += 4 * size
            entries[name] = data.reshape(shape)
    except (struct.error, ValueError) as exc:
        raise ValueError(f"{path}: truncated or corrupt checkpoint ({exc})") from exc
    if _CONFIG_KEY not in entries:
        raise ValueError(f"{path}: checkpoint lacks the {_CONFIG_KEY} entry")
    cv = entries.pop(_CONFIG_KEY)
    if cv.shape != (6,):
        raise ValueError(f"{path}: malformed {_CONFIG_KEY} entry")
    fusion = _FUSION_NAMES.get(int(cv[5]))
    if fusion is None:
        raise ValueError(f"{path}: unknown fusion id {cv[5]!r}")
    cfg = ModelConfig(
        feature_channels=int(cv[0]), gru_hidden=int(cv[1]), iterations=int(cv[2]),
        lookup_radius=int(cv[3]), event_bins=int(cv[4]), fusion_variant=fusion,
    )
    model = Model(cfg, seed=0)
    expected = set(model.params)
    got = set(entries)
    if expected != got:
        missing = sorted(expected - got)[:3]
        extra = sorted(got - expected)[:3]
        raise ValueError(f"{path}: parameter set mismatch "
                         f"(missing {missing}, unexpected {extra})")
    for name, data in entries.items():
        if model.params[name].data.shape != data.shape:
            raise ValueError(f"{path}: shape mismatch for {name}: "
                             f"{data.shape} vs {model.params[name].data.shape}")
        model.params[name] = Tensor(data.copy(), requires_grad=True)
    return model
