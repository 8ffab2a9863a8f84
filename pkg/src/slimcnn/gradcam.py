"""Grad-CAM heatmaps, jet colouring, superimposition and the case grid."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import font
from .data import IMAGE_SUFFIXES, load_grayscale_image
from .imaging import jet, resize_bilinear, round_half_up, write_png
from .model import Model
from .tensor import reduce

__all__ = ["gradcam_heatmap", "gradcam_display", "superimpose", "jet", "resize_bilinear",
           "render_cases", "CaseResult"]

COLUMNS = ("original", "grey heatmap", "jet heatmap", "prediction")
MIN_PANEL = 128


def _gradcam(m: Model, image: np.ndarray, last_conv: str, class_index: int | None):
    node = m.layer(last_conv)
    if node.kind != "conv2d":
        raise ValueError(f"layer {last_conv!r} is a {node.kind} layer, not a convolution")
    logits, caches = m.forward_train(np.asarray(image)[None])
    idx = m.index_of(last_conv)
    acts = next(out for i, _, out in caches if i == idx)[0]
    target = int(np.argmax(logits[0])) if class_index is None else int(class_index)
    if not 0 <= target < logits.shape[1]:
        raise ValueError(f"class index {target} out of range")
    seed = np.zeros_like(logits)
    seed[0, target] = 1.0
    _, grad = m.backward(caches, seed, stop_at=last_conv, param_grads=False)
    # channel importance = spatial mean of the class-score gradient
    weights = reduce(grad[0].astype(np.float64), (0, 1), "mean")
    raw = acts.astype(np.float64) @ weights
    heat = np.maximum(raw, 0.0)
    top = heat.max()
    heat = heat / top if top > 0 else np.zeros_like(heat)
    return heat, logits[0], target


def gradcam_heatmap(m: Model, image: np.ndarray, last_conv: str = "lastConv",
                    class_index: int | None = None) -> np.ndarray:
    """Class-activation map over the ``last_conv`` grid, normalised to [0, 1].

    The target is the top-scoring class unless ``class_index`` is given.
    Negative evidence is clamped to zero before normalising; an all-zero map
    is returned when nothing is positive.
    """
    return _gradcam(m, image, last_conv, class_index)[0]


def _to_gray255(image: np.ndarray) -> np.ndarray:
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 3:
        img = img[:, :, 0]
    return np.clip(round_half_up(img * 255), 0, 255)


def _heat_levels(hm: np.ndarray) -> np.ndarray:
    return round_half_up(np.clip(hm, 0, 1) * 255)


def superimpose(hm: np.ndarray, image: np.ndarray, alpha: float = 0.4) -> np.ndarray:
    """``round(jet(heatmap) * alpha + image)`` on the 0-255 scale, as uint8 RGB."""
    if alpha < 0:
        raise ValueError("alpha must be >= 0")
    gray = _to_gray255(image)
    if hm.shape != gray.shape:
        raise ValueError(f"heatmap {hm.shape} and image {gray.shape} differ; resize first")
    colour = jet(_heat_levels(hm) / 255).astype(np.float64)
    out = round_half_up(colour * alpha + gray[:, :, None])
    return np.clip(out, 0, 255).astype(np.uint8)


def gradcam_display(m: Model, image: np.ndarray, last_conv: str = "lastConv", alpha: float = 0.4,
                    class_index: int | None = None):
    """Heatmap plus the three rendered panels for one image.

    Returns ``(heatmap, grey, jet_rgb, superimposed, logits, target)`` where the
    panels are at image resolution.
    """
    heat, logits, target = _gradcam(m, image, last_conv, class_index)
    h, w = image.shape[:2]
    big = np.clip(resize_bilinear(heat, h, w), 0, 1)
    levels = _heat_levels(big)
    grey = levels.astype(np.uint8)
    colour = jet(levels / 255)
    return heat, grey, colour, superimpose(big, image, alpha), logits, target


@dataclass
class CaseResult:
    path: Path
    predicted: int
    predicted_name: str
    true_name: str | None


def _image_files(directory: Path) -> list[Path]:
    return sorted((p for p in directory.rglob("*") if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES),
                  key=lambda p: str(p.relative_to(directory)).encode("utf-8"))


def select_cases(data_dir, m_cases: int = 4, seed: int = 888) -> list[Path]:
    """Draw ``m_cases`` images (without replacement) from ``data_dir``.

    A split root is sampled from its ``test`` subset.
    """
    d = Path(data_dir)
    if (d / "test").is_dir():
        d = d / "test"
    files = _image_files(d)
    if not files:
        raise FileNotFoundError(f"no images under {d}")
    rng = np.random.default_rng(seed)
    picks = rng.choice(len(files), size=min(m_cases, len(files)), replace=False)
    return [files[i] for i in picks]


def _upscale(panel: np.ndarray, factor: int) -> np.ndarray:
    if panel.ndim == 2:
        panel = np.repeat(panel[:, :, None], 3, axis=2)
    return np.repeat(np.repeat(panel, factor, axis=0), factor, axis=1)


def render_cases(m: Model, cases=None, data_dir=None, m_cases: int = 4, seed: int = 888,
                 alpha: float = 0.4, last_conv: str = "lastConv", out_dir=None):
    """Build the explanation grid: one row per case, four panels per row.

    Supplied ``cases`` override ``m_cases``; otherwise cases are sampled from
    ``data_dir`` with ``seed``. When ``out_dir`` is given, each superimposed
    image is written as ``<stem>_gradcam.png`` and the grid as
    ``cases_grid.png``. Returns ``(grid, results)``.
    """
    if cases:
        paths = [Path(p) for p in cases]
    elif data_dir is not None:
        paths = select_cases(data_dir, m_cases, seed)
    else:
        raise ValueError("either cases or data_dir is required")
    h, w, _ = m.input_shape
    names = m.classes or [str(i) for i in range(m.output_shape[0])]
    scale = max(1, MIN_PANEL // max(h, w))
    ph, pw = h * scale, w * scale
    gap = 4
    header = font.LINE_H + 4
    caption = 2 * font.LINE_H + 4
    row_h = ph + caption
    grid = np.zeros((header + len(paths) * row_h, 4 * pw + 3 * gap, 3), dtype=np.uint8)
    for c, title in enumerate(COLUMNS):
        font.draw_text(grid, font.fit_text(title, pw), 2, c * (pw + gap))

    results = []
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    for r, path in enumerate(paths):
        image = load_grayscale_image(path, h, w)
        _, grey, colour, blended, _, target = gradcam_display(m, image, last_conv, alpha)
        true_name = path.parent.name if path.parent.name in names else None
        results.append(CaseResult(path, target, names[target], true_name))
        top = header + r * row_h
        panels = (_to_gray255(image).astype(np.uint8), grey, colour, blended)
        for c, panel in enumerate(panels):
            left = c * (pw + gap)
            grid[top:top + ph, left:left + pw] = _upscale(panel, scale)
        font.draw_text(grid, font.fit_text(path.stem, pw), top + ph + 2, 0)
        font.draw_text(grid, font.fit_text(f"P: {names[target]}", pw), top + ph + 2, 3 * (pw + gap))
        font.draw_text(grid, font.fit_text(f"T: {true_name or '?'}", pw), top + ph + 2 + font.LINE_H,
                       3 * (pw + gap))
        if out is not None:
            write_png(out / f"{path.stem}_gradcam.png", blended)
    if out is not None:
        write_png(out / "cases_grid.png", grid)
    return grid, results
