"""Paired image + condition corpus directories.

A corpus directory holds NNNN.png tiles with NNNN.cond sidecars (one
comma-separated line of raw condition values) and optionally an
index.json manifest.  Images travel through the models as float arrays
in [-1, 1], channel-first.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np
from PIL import Image


class CorpusError(ValueError):
    """Missing pairs or malformed condition files (CLI exit code 3)."""


def image_to_unit(img: np.ndarray) -> np.ndarray:
    """uint8 (H, W, 3) -> float (3, H, W) in [-1, 1]."""
    return np.asarray(img, dtype=np.float64).transpose(2, 0, 1) / 127.5 - 1.0


def unit_to_image(arr: np.ndarray) -> np.ndarray:
    """float (3, H, W) in [-1, 1] -> uint8 (H, W, 3)."""
    arr = np.clip(arr, -1.0, 1.0)
    return ((arr + 1.0) * 127.5).round().astype(np.uint8).transpose(1, 2, 0)


def load_image_corpus(path):
    """Load a corpus directory; returns (images, conditions, names).

    images: (N, 3, H, W) float in [-1, 1]; conditions: (N, k) raw units.
    Pairs are ordered by filename.  A .png without its .cond sidecar (or
    the reverse) is an error, as are ragged condition rows.
    """
    path = Path(path)
    if not path.is_dir():
        raise CorpusError(f"{path}: not a directory")
    pngs = sorted(path.glob("*.png"))
    if not pngs:
        raise CorpusError(f"{path}: no .png files")
    images, conditions, names = [], [], []
    width = None
    for png in pngs:
        cond_path = png.with_suffix(".cond")
        if not cond_path.exists():
            raise CorpusError(f"{png.name}: missing condition sidecar {cond_path.name}")
        with Image.open(png) as im:
            arr = np.asarray(im.convert("RGB"))
        try:
            values = [float(v) for v in cond_path.read_text().strip().split(",")]
        except ValueError as exc:
            raise CorpusError(f"{cond_path.name}: unparseable condition row") from exc
        if width is None:
            width = len(values)
        elif len(values) != width:
            raise CorpusError(
                f"{cond_path.name}: {len(values)} values, expected {width}")
        images.append(image_to_unit(arr))
        conditions.append(values)
        names.append(png.stem)
    strays = {p.stem for p in path.glob("*.cond")} - set(names)
    if strays:
        raise CorpusError(f"{path}: condition files without images: {sorted(strays)[:5]}")
    return np.stack(images), np.array(conditions, dtype=np.float64), names


def save_image(path, arr: np.ndarray) -> None:
    """Write one (3, H, W) unit-range array as PNG."""
    Image.fromarray(unit_to_image(arr)).save(path)


def save_image_grid(path, images: np.ndarray, cols: int = 8) -> None:
    """Tile (N, 3, H, W) unit-range images into one contact-sheet PNG."""
    n, _, h, w = images.shape
    cols = min(cols, n)
    rows = (n + cols - 1) // cols
    sheet = np.zeros((rows * h, cols * w, 3), dtype=np.uint8)
    for i in range(n):
        r, c = divmod(i, cols)
        sheet[r * h:(r + 1) * h, c * w:(c + 1) * w] = unit_to_image(images[i])
    Image.fromarray(sheet).save(path)


def write_corpus(path, images: np.ndarray, conditions: np.ndarray,
                 metadata: dict | None = None) -> None:
    """Write unit-range images + raw conditions as a corpus directory."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, (img, cond) in enumerate(zip(images, conditions)):
        name = f"{i:04d}"
        save_image(path / f"{name}.png", img)
        (path / f"{name}.cond").write_text(
            ",".join(f"{v:.6f}" for v in np.atleast_1d(cond)) + "\n")
        entries.append({"image": f"{name}.png", "cond": f"{name}.cond"})
    manifest = {"count": len(entries), "entries": entries}
    manifest.update(metadata or {})
    (path / "index.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
