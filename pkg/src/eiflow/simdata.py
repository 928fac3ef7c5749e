"""Synthetic scenes and a threshold-crossing event simulator.

A scene is a band-limited noise background plus translating foreground
patches, all moving at constant velocity over one frame interval.  Events
come from tracking per-pixel log intensity across M analytic substeps with
linear interpolation in between: every signed crossing of a multiple of the
contrast threshold emits one event at the interpolated time, against a
residual reference level that persists across substeps.  No noise is added,
so generation is exactly reproducible from the seed.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .events import EventStream, read_events, write_events
from .evalviz import FlowField, read_flo, read_ppm, write_flo, write_ppm
from .train import TrainSample

__all__ = ["Patch", "Scene", "SceneSample", "SimConfig", "render",
           "events_from_log_frames", "simulate_events", "make_scene",
           "sample_from_scene", "make_dataset", "save_sample", "load_sample",
           "save_dataset", "load_dataset", "dataset_dirs", "to_rgb",
           "band_limited_noise"]

_TEX_LO, _TEX_HI = 0.1, 1.0  # keep intensities positive so log is finite


@dataclass(frozen=True)
class Patch:
    texture: np.ndarray  # (ph, pw) float in [_TEX_LO, _TEX_HI]
    top_left: tuple[float, float]  # (y, x) at t = 0
    velocity: tuple[float, float]  # (vx, vy) px / frame
    flat: bool = False


@dataclass(frozen=True)
class Scene:
    background: np.ndarray  # oversized (H + 2*margin, W + 2*margin)
    height: int
    width: int
    margin: int
    global_velocity: tuple[float, float]  # (vx, vy) px / frame
    patches: tuple[Patch, ...] = ()
    contrast: float = 0.2
    substeps: int = 16
    frame_us: int = 10000
    seed: int = 0

    def __post_init__(self):
        if self.contrast <= 0:
            raise ValueError("contrast threshold must be positive")
        if self.substeps < 1:
            raise ValueError("substeps must be >= 1")
        hb, wb = self.background.shape
        if hb < self.height + 2 * self.margin or wb < self.width + 2 * self.margin:
            raise ValueError("background too small for frame plus margin")
        vmax = max(abs(self.global_velocity[0]), abs(self.global_velocity[1]))
        if vmax > self.margin:
            raise ValueError("margin too small for global velocity")


@dataclass
class SceneSample:
    image1: np.ndarray  # (3, H, W) float32
    image2: np.ndarray
    events: EventStream
    gt_fwd: FlowField
    gt_bwd: FlowField
    event_free_mask: np.ndarray | None  # (H, W) uint8, 1 = provably no events
    dt: float
    seed: int = 0
    velocity: tuple[float, float] | None = None  # scene global (vx, vy) px/frame

    def to_train_sample(self) -> TrainSample:
        return TrainSample(self.image1, self.image2, self.events,
                           self.gt_fwd, self.gt_bwd)


@dataclass(frozen=True)
class SimConfig:
    height: int = 64
    width: int = 64
    velocity_max: float = 8.0
    max_patches: int = 2
    flat_patch_prob: float = 0.4
    patch_size_range: tuple[int, int] = (10, 24)
    contrast: float = 0.2
    substeps: int = 16
    frame_us: int = 10000
    texture_cutoff: float = 0.15  # low-pass cutoff as a fraction of Nyquist
    seed: int = 0

    def __post_init__(self):
        if self.velocity_max <= 0:
            raise ValueError("velocity_max must be positive")
        if self.max_patches < 0:
            raise ValueError("max_patches must be non-negative")


def band_limited_noise(rng: np.random.Generator, h: int, w: int,
                       cutoff: float = 0.15) -> np.ndarray:
    """Smoothed random field rescaled into [_TEX_LO, _TEX_HI]."""
    white = rng.standard_normal((h, w))
    fy = np.fft.fftfreq(h)[:, None]
    fx = np.fft.fftfreq(w)[None, :]
    # Gaussian low-pass; cutoff is relative to the 0.5 cycles/px Nyquist rate.
    sigma = 0.5 * cutoff
    keep = np.exp(-(fy * fy + fx * fx) / (2.0 * sigma * sigma))
    tex = np.fft.ifft2(np.fft.fft2(white) * keep).real
    lo, hi = tex.min(), tex.max()
    if hi - lo < 1e-12:
        return np.full((h, w), 0.5 * (_TEX_LO + _TEX_HI))
    return _TEX_LO + (tex - lo) * (_TEX_HI - _TEX_LO) / (hi - lo)


def _bilinear_sample(img: np.ndarray, ys: np.ndarray, xs: np.ndarray) -> np.ndarray:
    h, w = img.shape
    y0 = np.clip(np.floor(ys).astype(np.int64), 0, h - 2)
    x0 = np.clip(np.floor(xs).astype(np.int64), 0, w - 2)
    fy = ys - y0
    fx = xs - x0
    v00 = img[y0, x0]
    v01 = img[y0, x0 + 1]
    v10 = img[y0 + 1, x0]
    v11 = img[y0 + 1, x0 + 1]
    return ((1 - fy) * (1 - fx) * v00 + (1 - fy) * fx * v01
            + fy * (1 - fx) * v10 + fy * fx * v11)


def _splat(texture: np.ndarray, top: float, left: float,
           h: int, w: int) -> tuple[np.ndarray, np.ndarray]:
    """Bilinear scatter of a patch at fractional position.

    Returns (value, coverage); coverage is a partition of unity inside the
    patch footprint and fades linearly over the 1-px boundary ring.
    """
    ph, pw = texture.shape
    yy = (top + np.arange(ph))[:, None] + np.zeros((1, pw))
    xx = (left + np.arange(pw))[None, :] + np.zeros((ph, 1))
    y0 = np.floor(yy).astype(np.int64)
    x0 = np.floor(xx).astype(np.int64)
    fy = yy - y0
    fx = xx - x0
    value = np.zeros((h, w))
    cover = np.zeros((h, w))
    for dy, dx, wgt in ((0, 0, (1 - fy) * (1 - fx)), (0, 1, (1 - fy) * fx),
                        (1, 0, fy * (1 - fx)), (1, 1, fy * fx)):
        ty = y0 + dy
        tx = x0 + dx
        ok = (ty >= 0) & (ty < h) & (tx >= 0) & (tx < w)
        np.add.at(value, (ty[ok], tx[ok]), (texture * wgt)[ok])
        np.add.at(cover, (ty[ok], tx[ok]), wgt[ok])
    return value, np.clip(cover, 0.0, 1.0)


def render(scene: Scene, t: float) -> np.ndarray:
    """Grayscale frame at fraction ``t`` of the interval, (H, W) float64."""
    if not 0.0 <= t <= 1.0:
        raise ValueError("t must lie in [0, 1]")
    h, w, m = scene.height, scene.width, scene.margin
    vx, vy = scene.global_velocity
    ys = (np.arange(h)[:, None] + m - vy * t) + np.zeros((1, w))
    xs = (np.arange(w)[None, :] + m - vx * t) + np.zeros((h, 1))
    img = _bilinear_sample(scene.background, ys, xs)
    for p in scene.patches:
        top = p.top_left[0] + p.velocity[1] * t
        left = p.top_left[1] + p.velocity[0] * t
        value, cover = _splat(p.texture, top, left, h, w)
        img = img * (1.0 - cover) + value
    return img


def to_rgb(frame: np.ndarray) -> np.ndarray:
    """(H, W) grayscale -> network-shaped (3, H, W) float32."""
    return np.repeat(frame[None].astype(np.float32), 3, axis=0)


def _patch_footprint(patch: Patch, t: float, h: int, w: int) -> np.ndarray:
    _, cover = _splat(np.ones_like(patch.texture),
                      patch.top_left[0] + patch.velocity[1] * t,
                      patch.top_left[1] + patch.velocity[0] * t, h, w)
    return cover >= 0.5


def _erode(mask: np.ndarray, iterations: int) -> np.ndarray:
    m = mask.astype(bool)
    for _ in range(iterations):
        p = np.pad(m, 1, constant_values=False)
        m = (p[1:-1, 1:-1] & p[:-2, 1:-1] & p[2:, 1:-1]
             & p[1:-1, :-2] & p[1:-1, 2:])
    return m


def events_from_log_frames(logs: np.ndarray, frame_us: int,
                           contrast: float) -> EventStream:
    """Threshold-crossing events from uniformly spaced log-intensity frames.

    ``logs`` is (M+1, H, W) sampled at times linspace(0, frame_us, M+1);
    intensity is linear in between.  A reference level per pixel starts at
    the first frame and advances by one contrast step per emitted event, so
    residual sub-threshold change carries across segments.
    """
    logs = np.asarray(logs, dtype=np.float64)
    if logs.ndim != 3 or logs.shape[0] < 2:
        raise ValueError("need a (M+1, H, W) stack with M >= 1")
    c = float(contrast)
    if c <= 0:
        raise ValueError("contrast threshold must be positive")
    m_steps, h, w = logs.shape[0] - 1, logs.shape[1], logs.shape[2]
    taus = np.linspace(0.0, 1.0, m_steps + 1)
    ref = logs[0].copy()
    xs_all, ys_all, ts_all, ps_all = [], [], [], []
    grid_y, grid_x = np.mgrid[0:h, 0:w]
    for k in range(m_steps):
        l0, l1 = logs[k], logs[k + 1]
        d = l1 - l0
        sgn = np.sign(d)
        # Signed progress past the reference, in the direction of change;
        # the small epsilon keeps exact multiples of c from rounding down.
        side = sgn * (l1 - ref)
        count = np.maximum(np.floor(side / c + 1e-9).astype(np.int64), 0)
        count[sgn == 0] = 0
        live = count > 0
        if not live.any():
            continue
        n = count[live]
        total = int(n.sum())
        pix_sgn = np.repeat(sgn[live], n)
        pix_ref = np.repeat(ref[live], n)
        pix_l0 = np.repeat(l0[live], n)
        pix_d = np.repeat(d[live], n)
        first = np.repeat(np.cumsum(n) - n, n)
        j = np.arange(total) - first + 1
        levels = pix_ref + j * c * pix_sgn
        t0 = frame_us * taus[k]
        t1 = frame_us * taus[k + 1]
        ts = t0 + (levels - pix_l0) / pix_d * (t1 - t0)
        xs_all.append(np.repeat(grid_x[live], n))
        ys_all.append(np.repeat(grid_y[live], n))
        ts_all.append(ts)
        ps_all.append(pix_sgn.astype(np.int8))
        ref = ref + count * c * sgn
    if not xs_all:
        return EventStream([], [], [], [], 0, frame_us, w, h)
    xs = np.concatenate(xs_all)
    ys = np.concatenate(ys_all)
    ts = np.clip(np.rint(np.concatenate(ts_all)), 0, frame_us).astype(np.int64)
    ps = np.concatenate(ps_all)
    order = np.argsort(ts, kind="stable")
    return EventStream(xs[order], ys[order], ts[order], ps[order],
                       0, frame_us, w, h)


def simulate_events(scene: Scene) -> EventStream:
    """Threshold-crossing events over the full frame interval [0, frame_us]."""
    taus = np.linspace(0.0, 1.0, scene.substeps + 1)
    logs = np.stack([np.log(render(scene, float(t))) for t in taus])
    return events_from_log_frames(logs, scene.frame_us, scene.contrast)


def _random_velocity(rng: np.random.Generator, vmax: float) -> tuple[float, float]:
    mag = float(rng.uniform(0.0, vmax))
    ang = float(rng.uniform(0.0, 2.0 * math.pi))
    return (mag * math.cos(ang), mag * math.sin(ang))


def make_scene(cfg: SimConfig, rng: np.random.Generator, seed: int = 0) -> Scene:
    margin = int(math.ceil(cfg.velocity_max)) + 2
    bg = band_limited_noise(rng, cfg.height + 2 * margin,
                            cfg.width + 2 * margin, cfg.texture_cutoff)
    patches = []
    lo, hi = cfg.patch_size_range
    for _ in range(int(rng.integers(0, cfg.max_patches + 1))):
        ph = int(rng.integers(lo, hi + 1))
        pw = int(rng.integers(lo, hi + 1))
        flat = bool(rng.random() < cfg.flat_patch_prob)
        if flat:
            tex = np.full((ph, pw), float(rng.uniform(0.2, 0.9)))
        else:
            tex = band_limited_noise(rng, ph, pw, cfg.texture_cutoff)
        top = float(rng.uniform(0, cfg.height - ph))
        left = float(rng.uniform(0, cfg.width - pw))
        patches.append(Patch(tex, (top, left),
                             _random_velocity(rng, cfg.velocity_max), flat))
    return Scene(bg, cfg.height, cfg.width, margin,
                 _random_velocity(rng, cfg.velocity_max), tuple(patches),
                 cfg.contrast, cfg.substeps, cfg.frame_us, seed)


def sample_from_scene(scene: Scene, events_full: EventStream,
                      dt: float) -> SceneSample:
    if not 0.0 <= dt <= 1.0:
        raise ValueError("dt must lie in [0, 1]")
    h, w = scene.height, scene.width
    vx, vy = scene.global_velocity
    image1 = to_rgb(render(scene, 0.0))
    image2 = to_rgb(render(scene, dt))
    if dt == 0.0:
        events = EventStream([], [], [], [], 0, 0, w, h)
    else:
        events = events_full.clip(int(round(dt * scene.frame_us)))
    u_f = np.full((h, w), vx * dt, np.float32)
    v_f = np.full((h, w), vy * dt, np.float32)
    u_b = np.full((h, w), -vx * dt, np.float32)
    v_b = np.full((h, w), -vy * dt, np.float32)
    free = np.zeros((h, w), bool)
    for p in scene.patches:
        fp0 = _patch_footprint(p, 0.0, h, w)
        fp1 = _patch_footprint(p, dt, h, w)
        u_f[fp0] = p.velocity[0] * dt
        v_f[fp0] = p.velocity[1] * dt
        u_b[fp1] = -p.velocity[0] * dt
        v_b[fp1] = -p.velocity[1] * dt
        if p.flat:
            free |= _erode(fp0 & fp1, 2)
    return SceneSample(image1, image2, events,
                       FlowField(u_f, v_f), FlowField(u_b, v_b),
                       free.astype(np.uint8), dt, scene.seed,
                       (float(vx), float(vy)))


def make_dataset(n: int, cfg: SimConfig,
                 dt_values: Sequence[float] = (1.0,)) -> list[SceneSample]:
    """n scenes x len(dt_values) samples, scene-major order, seeded by cfg."""
    if n < 1:
        raise ValueError("n must be >= 1")
    samples = []
    for i, child in enumerate(np.random.SeedSequence(cfg.seed).spawn(n)):
        rng = np.random.default_rng(child)
        scene = make_scene(cfg, rng, seed=i)
        events_full = simulate_events(scene)
        for dt in dt_values:
            samples.append(sample_from_scene(scene, events_full, float(dt)))
    return samples


def save_sample(directory, sample: SceneSample) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    write_ppm(d / "image1.ppm", sample.image1)
    write_ppm(d / "image2.ppm", sample.image2)
    write_events(d / "events.evs", sample.events)
    write_flo(d / "flow_fwd.flo", sample.gt_fwd)
    write_flo(d / "flow_bwd.flo", sample.gt_bwd)
    meta = {"dt": repr(float(sample.dt)), "seed": str(int(sample.seed))}
    if sample.velocity is not None:
        meta["vx"] = repr(float(sample.velocity[0]))
        meta["vy"] = repr(float(sample.velocity[1]))
    lines = [f"{k}={v}" for k, v in sorted(meta.items())]
    (d / "meta").write_text("\n".join(lines) + "\n")


def load_sample(directory) -> SceneSample:
    d = Path(directory)
    image1 = read_ppm(d / "image1.ppm")
    image2 = read_ppm(d / "image2.ppm")
    events = read_events(d / "events.evs")
    gt_fwd = read_flo(d / "flow_fwd.flo")
    gt_bwd = read_flo(d / "flow_bwd.flo")
    meta = {}
    for line in (d / "meta").read_text().splitlines():
        if line.strip():
            k, _, v = line.partition("=")
            meta[k] = v
    vel = None
    if "vx" in meta and "vy" in meta:
        vel = (float(meta["vx"]), float(meta["vy"]))
    return SceneSample(image1, image2, events, gt_fwd, gt_bwd, None,
                       float(meta.get("dt", 1.0)), int(meta.get("seed", 0)),
                       vel)


def dataset_dirs(root) -> list[Path]:
    return sorted(Path(root).glob("sample_[0-9][0-9][0-9][0-9][0-9]"))


def save_dataset(root, samples: Sequence[SceneSample]) -> None:
    for i, s in enumerate(samples):
        save_sample(Path(root) / f"sample_{i:05d}", s)


def load_dataset(root) -> list[SceneSample]:
    dirs = dataset_dirs(root)
    if not dirs:
        raise ValueError(f"no sample_%05d directories under {root}")
    return [load_sample(p) for p in dirs]
