"""File formats: PFM radiance, 8-bit PNG previews, CSV traces and parameter files."""

from __future__ import annotations

import csv
import re
from pathlib import Path

import numpy as np
from numpy.typing import NDArray
from PIL import Image

from uwrectify.image import ImageBuffer, srgb_to_linear, to_uint8
from uwrectify.optimize import TRACE_COLUMNS, LossBreakdown, trace_row
from uwrectify.render import MediumParams


def write_pfm(path, data: NDArray | ImageBuffer) -> Path:
    """Little-endian PFM (scale -1.0), rows stored bottom to top."""
    if isinstance(data, ImageBuffer):
        data = data.data
    arr = np.asarray(data, dtype="<f4")
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[..., 0]
    if arr.ndim == 2:
        tag = b"Pf"
    elif arr.ndim == 3 and arr.shape[2] == 3:
        tag = b"PF"
    else:
        raise ValueError("PFM holds 1 or 3 channels")
    h, w = arr.shape[:2]
    path = Path(path)
    with open(path, "wb") as f:
        f.write(tag + b"\n" + f"{w} {h}\n".encode() + b"-1.0\n")
        f.write(np.ascontiguousarray(arr[::-1]).tobytes())
    return path


def read_pfm(path) -> NDArray:
    """Read a PFM file into an (H, W, C) float64 array, top row first."""
    with open(path, "rb") as f:
        tag = f.readline().strip()
        if tag not in (b"PF", b"Pf"):
            raise ValueError(f"{path}: not a PFM file")
        dims = f.readline().split()
        while not dims:
            dims = f.readline().split()
        w, h = int(dims[0]), int(dims[1])
        scale = float(f.readline().strip())
        dtype = "<f4" if scale < 0 else ">f4"
        channels = 3 if tag == b"PF" else 1
        raw = np.frombuffer(f.read(w * h * channels * 4), dtype=dtype)
    if raw.size != w * h * channels:
        raise ValueError(f"{path}: truncated PFM data")
    return raw.reshape(h, w, channels)[::-1].astype(float)


def write_png(path, data: NDArray | ImageBuffer) -> Path:
    """Gamma-encode linear values (after float32 rounding) to 8-bit PNG.

    Values pass through float32 first so the PNG is exactly the display
    encoding of what the matching PFM stores.
    """
    if isinstance(data, ImageBuffer):
        data = data.data
    arr = np.asarray(data, dtype=np.float32).astype(float)
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[..., 0]
    path = Path(path)
    Image.fromarray(to_uint8(arr)).save(path, format="PNG")
    return path


def write_mask(path, mask: NDArray) -> Path:
    path = Path(path)
    Image.fromarray(np.where(np.asarray(mask, dtype=bool), 255, 0).astype(np.uint8)).save(path, format="PNG")
    return path


def read_png(path) -> NDArray:
    """Read an 8-bit PNG and undo the 2.4 gamma, returning linear (H, W, C)."""
    img = np.asarray(Image.open(path).convert("RGB"), dtype=float) / 255.0
    return srgb_to_linear(img)


def read_mask(path) -> NDArray:
    return np.asarray(Image.open(path).convert("L")) > 127


def read_image(path) -> ImageBuffer:
    """Load a PFM or PNG capture as linear light, with a sibling ``*_mask.png`` if present."""
    path = Path(path)
    data = read_pfm(path) if path.suffix.lower() == ".pfm" else read_png(path)
    mask_path = path.with_name(path.stem + "_mask.png")
    mask = read_mask(mask_path) if mask_path.exists() else None
    return ImageBuffer(data, mask)


def write_image_set(prefix, img: ImageBuffer) -> list[Path]:
    """Write ``prefix.pfm``, ``prefix.png`` and ``prefix_mask.png``."""
    prefix = Path(prefix)
    return [
        write_pfm(prefix.with_name(prefix.name + ".pfm"), img),
        write_png(prefix.with_name(prefix.name + ".png"), img),
        write_mask(prefix.with_name(prefix.name + "_mask.png"), img.mask),
    ]


def _fmt(x) -> str:
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return repr(float(x))


def write_trace_csv(path, trace: list[LossBreakdown]) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(TRACE_COLUMNS)
        for entry in trace:
            writer.writerow([_fmt(v) for v in trace_row(entry)])
    return path


def read_trace_csv(path) -> dict[str, NDArray]:
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    header, body = rows[0], rows[1:]
    if tuple(header) != TRACE_COLUMNS:
        raise ValueError(f"{path}: unexpected trace columns {header}")
    cols = np.array(body, dtype=float).reshape(len(body), len(header))
    return {name: cols[:, i] for i, name in enumerate(header)}


_KV = re.compile(r"^\s*([A-Za-z_][\w.]*)\s*=\s*(.*?)\s*$")


def write_params(path, medium: MediumParams, extra: dict | None = None) -> Path:
    """Plain ``key = value`` lines, one channel per key."""
    lines = []
    for name, vec in (("A", medium.A), ("beta", medium.beta)):
        for ch, v in zip("rgb", vec):
            lines.append(f"{name}_{ch} = {float(v)!r}")
    for k, v in (extra or {}).items():
        lines.append(f"{k} = {v}")
    path = Path(path)
    path.write_text("\n".join(lines) + "\n")
    return path


def read_params(path) -> tuple[MediumParams, dict]:
    values = {}
    for line in Path(path).read_text().splitlines():
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        m = _KV.match(line)
        if not m:
            raise ValueError(f"{path}: cannot parse line {line!r}")
        values[m.group(1)] = m.group(2)
    A = [float(values.pop(f"A_{c}")) for c in "rgb"]
    beta = [float(values.pop(f"beta_{c}")) for c in "rgb"]
    return MediumParams(A, beta), values
