"""Gradient-weighted class activation maps and heatmap export."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .autodiff.ops import interpolation_matrix


@dataclass(frozen=True)
class ActivationMap:
    values: np.ndarray  # (frequency, time), non-negative
    layer: str
    target_class: int
    source_id: str = ""


@dataclass(frozen=True)
class HeatmapImage:
    """Rendered heatmap; row 0 is the highest frequency.

    ``intensity`` is the (upsampled) map as 8-bit grey levels, ``rgb`` the
    colour overlay on the spectrogram.
    """

    intensity: np.ndarray
    rgb: np.ndarray
    colormap: str = "viridis"

    @property
    def shape(self) -> tuple[int, int]:
        return self.intensity.shape


def grad_cam(net, segment, target_class: int, layer: str, source_id: str = "") -> ActivationMap:
    """Class activation map of ``layer`` for ``target_class``.

    ``net`` must provide ``forward(x, capture=dict)`` that stores the named
    layer's output tensor in ``capture``.  Gradients are taken of the raw
    class logit; channel weights are the spatial mean of those gradients.
    """
    x = np.asarray(segment)
    if x.ndim == 2:
        x = x[None, None]
    if x.ndim != 4 or x.shape[0] != 1:
        raise ValueError(f"expected one segment shaped (1, 1, bands, frames), got {x.shape}")
    capture: dict = {}
    with Tape() as tape:
        # a tracked input guarantees the graph is recorded even for frozen weights
        inp = Tensor(x.astype(getattr(net, "dtype", np.float64)), requires_grad=True)
        logits = net.forward(inp, capture=capture)
        n_classes = logits.shape[1]
        if not 0 <= int(target_class) < n_classes:
            raise ValueError(f"target class {target_class} outside 0..{n_classes - 1}")
        if layer not in capture:
            raise ValueError(f"unknown layer {layer!r}; available: {', '.join(sorted(capture))}")
        onehot = np.zeros(logits.shape, dtype=logits.dtype)
        onehot[0, int(target_class)] = 1
        score = ad.total(ad.mul(logits, Tensor(onehot)))
    tape.backward(score)

    acts = capture[layer].data[0].astype(np.float64)
    grads = tape.grad_of(capture[layer])[0].astype(np.float64)
    weights = grads.mean(axis=(1, 2))
    cam = np.maximum(np.tensordot(weights, acts, axes=1), 0.0)
    peak = cam.max()
    if peak > 0:
        cam = cam / peak
    return ActivationMap(cam, layer, int(target_class), source_id)


# perceptually uniform ramp, sampled from viridis at 0, .25, .5, .75, 1
_VIRIDIS = np.array([
    [68, 1, 84], [59, 82, 139], [33, 145, 140], [94, 201, 98], [253, 231, 37],
], dtype=np.float64)


def colormap(values: np.ndarray, name: str = "viridis") -> np.ndarray:
    if name == "viridis":
        stops = _VIRIDIS
    elif name == "gray":
        stops = np.array([[0, 0, 0], [255, 255, 255]], dtype=np.float64)
    else:
        raise ValueError(f"unknown colormap {name!r}")
    pos = np.clip(values, 0.0, 1.0) * (len(stops) - 1)
    lo = np.minimum(np.floor(pos).astype(int), len(stops) - 2)
    frac = (pos - lo)[..., None]
    return stops[lo] * (1 - frac) + stops[lo + 1] * frac


def upsample_map(values: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    """Align-corners bilinear resize; identity when shapes already agree."""
    if values.shape == tuple(shape):
        return values
    return interpolation_matrix(values.shape[0], shape[0]) @ values @ interpolation_matrix(values.shape[1], shape[1]).T


def overlay_and_upsample(cam: ActivationMap, spectrogram, alpha: float = 0.5,
                         cmap: str = "viridis") -> HeatmapImage:
    """Resize the map onto the spectrogram grid and blend it over a grey underlay."""
    spec = np.asarray(getattr(spectrogram, "values", spectrogram), dtype=np.float64)
    if spec.ndim != 2:
        raise ValueError("spectrogram must be two-dimensional")
    if cam.values.shape[0] > spec.shape[0] or cam.values.shape[1] > spec.shape[1]:
        raise ValueError(f"map {cam.values.shape} is larger than spectrogram {spec.shape}")
    heat = np.clip(upsample_map(cam.values, spec.shape), 0.0, 1.0)
    span = spec.max() - spec.min()
    grey = (spec - spec.min()) / span if span > 0 else np.zeros_like(spec)
    rgb = (1 - alpha) * grey[..., None] * 255.0 + alpha * colormap(heat, cmap)
    # flip so high frequencies are at the top
    return HeatmapImage(_to_u8(heat[::-1] * 255.0), _to_u8(rgb[::-1]), cmap)


def _to_u8(x: np.ndarray) -> np.ndarray:
    return np.clip(np.round(x), 0, 255).astype(np.uint8)


def encode_pgm(img: HeatmapImage) -> bytes:
    h, w = img.intensity.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + np.ascontiguousarray(img.intensity).tobytes()


def encode_ppm(img: HeatmapImage) -> bytes:
    h, w = img.rgb.shape[:2]
    return f"P6\n{w} {h}\n255\n".encode("ascii") + np.ascontiguousarray(img.rgb).tobytes()


def export_image(img: HeatmapImage, path, png: bool = False) -> list[Path]:
    """Write ``path`` as a P5 greymap plus a P6 colour overlay beside it.

    With ``png`` the overlay is also written as PNG (requires Pillow).
    Returns the written paths.
    """
    if img.intensity.size == 0:
        raise ValueError("cannot export an empty image")
    path = Path(path)
    written = []
    try:
        path.write_bytes(encode_pgm(img))
        written.append(path)
        ppm = path.with_suffix(".ppm")
        ppm.write_bytes(encode_ppm(img))
        written.append(ppm)
        if png:
            from PIL import Image

            out = path.with_suffix(".png")
            Image.fromarray(img.rgb).save(out, format="PNG")
            written.append(out)
    except OSError as exc:
        raise OSError(f"cannot write heatmap to {path}: {exc.strerror or exc}") from exc
    return written


def heatmap_filename(clip: str, target_class: str, layer: str) -> str:
    return f"{Path(clip).stem}_{target_class}_{layer}.pgm"
