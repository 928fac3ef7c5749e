"""Flow fields, evaluation metrics, flow/image file IO, and color rendering.

Metrics follow the dense/sparse evaluation recipe: EPE and outlier percentage
over the full frame, over pixels that emitted events, and over the event-free
remainder, plus their Dense Ratio summary.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, fields as dc_fields

import numpy as np

_FLO_SENTINEL = 202021.25


class FlowField:
    """Per-pixel displacement (u right, v down, pixels) with a validity mask."""

    __slots__ = ("u", "v", "valid")

    def __init__(self, u, v, valid=None):
        u = np.asarray(u, dtype=np.float32)
        v = np.asarray(v, dtype=np.float32)
        if u.shape != v.shape or u.ndim != 2:
            raise ValueError("u and v must be equal-shape 2-d arrays")
        if valid is None:
            valid = np.ones(u.shape, dtype=np.uint8)
        else:
            valid = (np.asarray(valid) != 0).astype(np.uint8)
            if valid.shape != u.shape:
                raise ValueError("valid mask shape differs from flow shape")
        if not np.isfinite(u[valid != 0]).all() or not np.isfinite(v[valid != 0]).all():
            raise ValueError("flow must be finite on valid pixels")
        self.u, self.v, self.valid = u, v, valid

    @classmethod
    def constant(cls, shape: tuple[int, int], du: float, dv: float) -> "FlowField":
        h, w = shape
        return cls(np.full((h, w), du, np.float32), np.full((h, w), dv, np.float32))

    @classmethod
    def from_array(cls, arr, valid=None) -> "FlowField":
        arr = np.asarray(arr)
        if arr.ndim != 3 or arr.shape[0] != 2:
            raise ValueError("expected a (2, H, W) array")
        return cls(arr[0], arr[1], valid)

    def as_array(self) -> np.ndarray:
        return np.stack([self.u, self.v])

    @property
    def shape(self) -> tuple[int, int]:
        return self.u.shape

    def magnitude(self) -> np.ndarray:
        return np.hypot(self.u.astype(np.float64), self.v.astype(np.float64))


# -- metrics -------------------------------------------------------------------


def _error_magnitude(pred: FlowField, gt: FlowField) -> np.ndarray:
    if pred.shape != gt.shape:
        raise ValueError("prediction and ground truth shapes differ")
    du = pred.u.astype(np.float64) - gt.u.astype(np.float64)
    dv = pred.v.astype(np.float64) - gt.v.astype(np.float64)
    return np.hypot(du, dv)


def _selected(pred: FlowField, gt: FlowField, mask) -> np.ndarray:
    sel = gt.valid != 0
    if mask is not None:
        mask = np.asarray(mask)
        if mask.shape != gt.shape:
            raise ValueError("mask shape differs from flow shape")
        sel = sel & (mask != 0)
    return sel


def epe(pred: FlowField, gt: FlowField, mask=None) -> float:
    """Mean endpoint error over valid (optionally masked) pixels."""
    sel = _selected(pred, gt, mask)
    if not sel.any():
        raise ValueError("epe over an empty pixel selection")
    return float(_error_magnitude(pred, gt)[sel].mean())


def outlier_pct(pred: FlowField, gt: FlowField, mask=None) -> float:
    """Percent of pixels with error > 3 px and > 5% of the gt magnitude."""
    sel = _selected(pred, gt, mask)
    if not sel.any():
        raise ValueError("outlier_pct over an empty pixel selection")
    err = _error_magnitude(pred, gt)[sel]
    gtm = gt.magnitude()[sel]
    bad = (err > 3.0) & (err > 0.05 * gtm)
    return float(bad.mean() * 100.0)


def dense_ratio(epe_dense: float, epe_masked: float, epe_excluded: float) -> float:
    """(EPE_dense + EPE_masked) / (EPE_dense + EPE_excluded)."""
    denom = epe_dense + epe_excluded
    if denom <= 0:
        raise ValueError("dense_ratio denominator must be positive")
    return (epe_dense + epe_masked) / denom


@dataclass(frozen=True)
class MetricsReport:
    epe_dense: float
    epe_masked: float
    epe_excluded: float
    out_dense: float
    out_masked: float
    out_excluded: float
    dense_ratio: float
    count_dense: int
    count_masked: int
    count_excluded: int

    CSV_HEADER = ("epe_dense,epe_masked,epe_excluded,"
                  "out_dense,out_masked,out_excluded,dense_ratio,"
                  "count_dense,count_masked,count_excluded")

    def csv_row(self) -> str:
        vals = [getattr(self, f.name) for f in dc_fields(self)]
        parts = [f"{v:.6f}" if isinstance(v, float) else str(v) for v in vals]
        return ",".join(parts)


def compute_report(pred: FlowField, gt: FlowField, event_mask) -> MetricsReport:
    """Dense / event-masked / event-excluded metrics plus Dense Ratio.

    Degenerate selections (no event pixels, or events everywhere) yield NaN
    for the affected entries instead of an error, so batch evaluation over
    arbitrary scenes never aborts.
    """
    em = np.asarray(event_mask) != 0
    masks = {
        "dense": None,
        "masked": em.astype(np.uint8),
        "excluded": (~em).astype(np.uint8),
    }
    epes, outs, counts = {}, {}, {}
    for name, m in masks.items():
        sel = _selected(pred, gt, m)
        counts[name] = int(sel.sum())
        if counts[name] == 0:
            epes[name] = float("nan")
            outs[name] = float("nan")
        else:
            epes[name] = epe(pred, gt, m)
            outs[name] = outlier_pct(pred, gt, m)
    denom = epes["dense"] + epes["excluded"]
    ratio = float("nan") if not denom > 0 else (epes["dense"] + epes["masked"]) / denom
    return MetricsReport(
        epes["dense"], epes["masked"], epes["excluded"],
        outs["dense"], outs["masked"], outs["excluded"],
        ratio, counts["dense"], counts["masked"], counts["excluded"],
    )


def write_report_csv(path, report: MetricsReport) -> None:
    with open(path, "w") as fh:
        fh.write(MetricsReport.CSV_HEADER + "\n")
        fh.write(report.csv_row() + "\n")


# -- flow file IO ---------------------------------------------------------------


def write_flo(path, field: FlowField) -> None:
    """Middlebury .flo: f32 sentinel, i32 width/height, interleaved (u, v)."""
    h, w = field.shape
    data = np.empty((h, w, 2), dtype="<f4")
    data[:, :, 0] = field.u
    data[:, :, 1] = field.v
    with open(path, "wb") as fh:
        fh.write(struct.pack("<fii", _FLO_SENTINEL, w, h))
        fh.write(data.tobytes())


def read_flo(path) -> FlowField:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 12:
        raise ValueError(f"{path}: truncated flow file header")
    sentinel, w, h = struct.unpack("<fii", raw[:12])
    if sentinel != _FLO_SENTINEL:
        raise ValueError(f"{path}: bad flow file sentinel {sentinel!r}")
    expect = 12 + h * w * 8
    if len(raw) != expect:
        raise ValueError(f"{path}: flow payload is {len(raw) - 12} bytes, "
                         f"expected {expect - 12}")
    data = np.frombuffer(raw[12:], dtype="<f4").reshape(h, w, 2)
    return FlowField(data[:, :, 0], data[:, :, 1])


# -- PPM image IO -----------------------------------------------------------------


def write_ppm(path, image: np.ndarray) -> None:
    """Write (H, W, 3) uint8 or (3, H, W) float in [0, 1] as binary PPM (P6)."""
    img = np.asarray(image)
    if img.ndim == 3 and img.shape[0] == 3 and img.dtype != np.uint8:
        img = np.clip(np.rint(np.moveaxis(img, 0, -1) * 255.0), 0, 255).astype(np.uint8)
    if img.ndim != 3 or img.shape[2] != 3 or img.dtype != np.uint8:
        raise ValueError("expected (H, W, 3) uint8 or (3, H, W) float image")
    h, w = img.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(img.tobytes())


def read_ppm(path) -> np.ndarray:
    """Read a binary PPM into (3, H, W) float32 in [0, 1]."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:2] != b"P6":
        raise ValueError(f"{path}: not a binary PPM (P6) file")
    # Header: three whitespace-separated fields after the magic, with
    # '#' comments allowed between them.
    pos = 2
    vals: list[int] = []
    while len(vals) < 3:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if pos < len(raw) and raw[pos : pos + 1] == b"#":
            while pos < len(raw) and raw[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError(f"{path}: malformed PPM header")
        vals.append(int(raw[start:pos]))
    pos += 1  # single whitespace byte after maxval
    w, h, maxval = vals
    if maxval != 255:
        raise ValueError(f"{path}: unsupported PPM maxval {maxval}")
    body = raw[pos : pos + h * w * 3]
    if len(body) != h * w * 3:
        raise ValueError(f"{path}: truncated PPM payload")
    img = np.frombuffer(body, dtype=np.uint8).reshape(h, w, 3)
    return (np.moveaxis(img, -1, 0).astype(np.float32) / 255.0)


# -- visualization -------------------------------------------------------------


def flow_to_color(field: FlowField, max_magnitude="auto") -> np.ndarray:
    """Direction-as-hue, magnitude-as-saturation rendering to (H, W, 3) uint8.

    Zero flow renders white. ``max_magnitude="auto"`` normalizes by the 99th
    percentile of the valid magnitudes; a positive number fixes the scale.
    """
    mag = field.magnitude()
    ang = np.arctan2(field.v.astype(np.float64), field.u.astype(np.float64))
    if max_magnitude == "auto":
        ref = mag[field.valid != 0]
        scale = float(np.percentile(ref, 99)) if ref.size else 0.0
    else:
        scale = float(max_magnitude)
        if scale <= 0:
            raise ValueError("max_magnitude must be positive")
    sat = np.zeros_like(mag) if scale <= 0 else np.clip(mag / scale, 0.0, 1.0)
    hue = (ang / (2.0 * np.pi)) % 1.0

    # Vectorized HSV -> RGB with value fixed at 1.
    k = hue * 6.0
    i = np.floor(k).astype(np.int64) % 6
    f = k - np.floor(k)
    p = 1.0 - sat
    q = 1.0 - sat * f
    t = 1.0 - sat * (1.0 - f)
    one = np.ones_like(sat)
    lut_r = [one, q, p, p, t, one]
    lut_g = [t, one, one, q, p, p]
    lut_b = [p, p, t, one, one, q]
    rgb = np.zeros(mag.shape + (3,), dtype=np.float64)
    for idx in range(6):
        sel = i == idx
        rgb[sel, 0] = lut_r[idx][sel]
        rgb[sel, 1] = lut_g[idx][sel]
        rgb[sel, 2] = lut_b[idx][sel]
    return np.clip(np.rint(rgb * 255.0), 0, 255).astype(np.uint8)
