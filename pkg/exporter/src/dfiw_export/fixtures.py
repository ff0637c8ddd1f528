"""Golden fixture sets: per-image activation dumps plus a manifest.

Directory layout:

    manifest.txt            UTF-8 key=value lines (versions, tolerance,
                            source identity, image and dump listing)
    <image stem>__<layer>.f32   per-layer dump: one ASCII header line
                                "dims n c h w\\n" followed by raw f32 LE data
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from . import __version__
from .dfiw import DfiwFile, read_dfiw
from .reference import CAPTURE_LAYERS, capture_activations, load_image_rgb

TOLERANCE = 1e-3


def dump_path(out_dir: str, image_path: str, layer: str) -> Path:
    return Path(out_dir) / f"{Path(image_path).stem}__{layer}.f32"


def write_dump(path: Path, activation: np.ndarray) -> None:
    header = "dims " + " ".join(str(d) for d in activation.shape) + "\n"
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(np.ascontiguousarray(activation, dtype="<f4").tobytes())


def read_dump(path: str) -> np.ndarray:
    with open(path, "rb") as fh:
        header = fh.readline().decode("ascii").split()
        if header[0] != "dims":
            raise ValueError(f"{path}: missing dims header")
        dims = tuple(int(d) for d in header[1:])
        data = np.frombuffer(fh.read(), dtype="<f4")
    if data.size != int(np.prod(dims)):
        raise ValueError(f"{path}: payload size {data.size} does not match dims {dims}")
    return data.reshape(dims).copy()


def generate_fixtures(
    dfiw_path: str,
    image_paths: list[str],
    out_dir: str,
    source_identity: str = "",
) -> list[Path]:
    """Run the reference model on each image and dump all capture layers."""
    model: DfiwFile = read_dfiw(dfiw_path)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    manifest = [
        f"producer=dfiw-export {__version__}",
        f"weights={Path(dfiw_path).name}",
        f"tolerance_rel={TOLERANCE!r}",
        f"source={source_identity}",
        f"layers={','.join(CAPTURE_LAYERS)}",
    ]
    for image_path in image_paths:
        captures = capture_activations(model, load_image_rgb(image_path))
        for layer in CAPTURE_LAYERS:
            path = dump_path(out_dir, image_path, layer)
            write_dump(path, captures[layer])
            written.append(path)
        manifest.append(f"image={Path(image_path).name}")
    (out / "manifest.txt").write_text("\n".join(manifest) + "\n", encoding="utf-8")
    return written


def read_manifest(fixture_dir: str) -> dict:
    entries: dict = {"images": []}
    for line in (Path(fixture_dir) / "manifest.txt").read_text(encoding="utf-8").splitlines():
        key, _, value = line.partition("=")
        if key == "image":
            entries["images"].append(value)
        elif key:
            entries[key] = value
    return entries
