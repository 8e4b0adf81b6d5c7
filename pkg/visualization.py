"""
Visualization Module
Draws detections onto images (red outlines plus a built-in 5x3 bitmap-font
label) and plots training loss curves with matplotlib.
"""

import logging
import math
from pathlib import Path
from typing import Dict, Optional, Sequence, Tuple, Union

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from detector import Detection  # noqa: E402
from errors import ShapeError  # noqa: E402

logger = logging.getLogger(__name__)

RED = np.array([1.0, 0.0, 0.0])
GLYPH_HEIGHT = 5
GLYPH_WIDTH = 3
GLYPH_ADVANCE = GLYPH_WIDTH + 1
LABEL_GAP = 1

_GLYPH_ROWS: Dict[str, Tuple[str, ...]] = {
    "0": ("111", "101", "101", "101", "111"),
    "1": ("010", "110", "010", "010", "111"),
    "2": ("111", "001", "111", "100", "111"),
    "3": ("111", "001", "111", "001", "111"),
    "4": ("101", "101", "111", "001", "001"),
    "5": ("111", "100", "111", "001", "111"),
    "6": ("111", "100", "111", "101", "111"),
    "7": ("111", "001", "001", "010", "010"),
    "8": ("111", "101", "111", "101", "111"),
    "9": ("111", "101", "111", "001", "111"),
    ".": ("000", "000", "000", "000", "010"),
    "-": ("000", "000", "111", "000", "000"),
    "<": ("001", "010", "100", "010", "001"),
    ">": ("100", "010", "001", "010", "100"),
    " ": ("000", "000", "000", "000", "000"),
    "?": ("111", "001", "010", "000", "010"),
    "A": ("010", "101", "111", "101", "101"),
    "B": ("110", "101", "110", "101", "110"),
    "C": ("011", "100", "100", "100", "011"),
    "D": ("110", "101", "101", "101", "110"),
    "E": ("111", "100", "110", "100", "111"),
    "F": ("111", "100", "110", "100", "100"),
    "G": ("011", "100", "101", "101", "011"),
    "H": ("101", "101", "111", "101", "101"),
    "I": ("111", "010", "010", "010", "111"),
    "J": ("001", "001", "001", "101", "010"),
    "K": ("101", "101", "110", "101", "101"),
    "L": ("100", "100", "100", "100", "111"),
    "M": ("101", "111", "111", "101", "101"),
    "N": ("110", "101", "101", "101", "101"),
    "O": ("010", "101", "101", "101", "010"),
    "P": ("110", "101", "110", "100", "100"),
    "Q": ("010", "101", "101", "110", "011"),
    "R": ("110", "101", "110", "101", "101"),
    "S": ("011", "100", "010", "001", "110"),
    "T": ("111", "010", "010", "010", "010"),
    "U": ("101", "101", "101", "101", "111"),
    "V": ("101", "101", "101", "101", "010"),
    "W": ("101", "101", "111", "111", "101"),
    "X": ("101", "101", "010", "101", "101"),
    "Y": ("101", "101", "010", "010", "010"),
    "Z": ("111", "001", "010", "100", "111"),
}

FONT: Dict[str, np.ndarray] = {
    char: np.array([[bit == "1" for bit in row] for row in rows], dtype=bool)
    for char, rows in _GLYPH_ROWS.items()
}


def glyph(char: str) -> np.ndarray:
    """5x3 boolean bitmap; lowercase maps to uppercase, unknown characters to '?'"""
    return FONT.get(char.upper(), FONT["?"])


def text_mask(text: str) -> np.ndarray:
    """Boolean bitmap of a label, glyphs separated by one blank column"""
    if not text:
        return np.zeros((GLYPH_HEIGHT, 0), dtype=bool)
    mask = np.zeros((GLYPH_HEIGHT, len(text) * GLYPH_ADVANCE - 1), dtype=bool)
    for index, char in enumerate(text):
        mask[:, index * GLYPH_ADVANCE:index * GLYPH_ADVANCE + GLYPH_WIDTH] = glyph(char)
    return mask


def class_label(class_id: int, class_names: Sequence[str]) -> str:
    """Name for class ids 1..K, "cls<N>" otherwise"""
    return class_names[class_id - 1] if 1 <= class_id <= len(class_names) else f"cls{class_id}"


def label_text(detection: Detection, class_names: Sequence[str]) -> str:
    return f"{class_label(detection.class_id, class_names)} {detection.score:.2f}"


def outline_bounds(detection: Detection, height: int, width: int) -> Tuple[int, int, int, int]:
    """Inclusive pixel rows/cols (x0, y0, x1, y1) of the outline, clipped into the frame"""
    box = detection.box
    x0 = min(max(int(math.floor(box.x_min)), 0), width - 1)
    y0 = min(max(int(math.floor(box.y_min)), 0), height - 1)
    x1 = min(max(int(math.ceil(box.x_max)) - 1, x0), width - 1)
    y1 = min(max(int(math.ceil(box.y_max)) - 1, y0), height - 1)
    return x0, y0, x1, y1


def label_origin(x0: int, y0: int, height: int, width: int) -> Tuple[int, int]:
    """Top-left of the label: above the outline with a one-pixel gap, clamped into the frame"""
    top = min(max(y0 - LABEL_GAP - GLYPH_HEIGHT, 0), max(height - GLYPH_HEIGHT, 0))
    left = min(max(x0, 0), width - 1)
    return left, top


def _draw_text(image: np.ndarray, mask: np.ndarray, left: int, top: int) -> None:
    height, width = image.shape[1:]
    rows = min(mask.shape[0], height - top)
    cols = min(mask.shape[1], width - left)
    if rows <= 0 or cols <= 0:
        return
    region = mask[:rows, :cols]
    window = image[:, top:top + rows, left:left + cols]
    window[:, region] = RED[:, None]


def annotate_image(image, detections: Sequence[Detection], class_names: Sequence[str]) -> np.ndarray:
    """
    Draw detections onto a copy of a (3,H,W) image.

    Lowest scores are drawn first so the highest-scoring box ends up on top.

    Args:
        image: RGB image in [0, 1]
        detections: Boxes to draw (clipped to the frame)
        class_names: Names for class ids 1..K; others render as "cls<N>"

    Returns:
        New annotated image; the input is not modified
    """
    out = np.array(getattr(image, "data", image), dtype=np.float32, copy=True)
    if out.ndim != 3 or out.shape[0] != 3:
        raise ShapeError(f"annotate_image expects a (3,H,W) image, got {out.shape}")
    height, width = out.shape[1:]
    order = sorted(range(len(detections)), key=lambda i: (detections[i].score, -i))
    for index in order:
        detection = detections[index]
        x0, y0, x1, y1 = outline_bounds(detection, height, width)
        out[:, y0, x0:x1 + 1] = RED[:, None]
        out[:, y1, x0:x1 + 1] = RED[:, None]
        out[:, y0:y1 + 1, x0] = RED[:, None]
        out[:, y0:y1 + 1, x1] = RED[:, None]
        left, top = label_origin(x0, y0, height, width)
        _draw_text(out, text_mask(label_text(detection, class_names)), left, top)
    return out


def plot_loss_history(reports: Sequence, save_path: Optional[Union[str, Path]] = None,
                      title: str = "Super-resolution training") -> plt.Figure:
    """
    Plot generator / discriminator loss terms against the training step.

    Args:
        reports: LossReport sequence
        save_path: Optional image path to save the figure to

    Returns:
        The matplotlib figure
    """
    steps = [r.step for r in reports]
    fig, (ax_g, ax_d) = plt.subplots(2, 1, figsize=(9, 7), sharex=True)
    ax_g.plot(steps, [r.l_perceptual for r in reports], label="perceptual", color="#2196F3", linewidth=1.5)
    ax_g.plot(steps, [r.l_total for r in reports], label="total", color="#FF9800", linewidth=1.5)
    ax_g.set_ylabel("generator loss")
    ax_g.legend(loc="upper right", fontsize=9, framealpha=0.9)
    ax_g.grid(alpha=0.3)
    ax_d.plot(steps, [r.l_gan for r in reports], label="adversarial (G)", color="#4CAF50", linewidth=1.5)
    ax_d.plot(steps, [r.discriminator_loss for r in reports], label="discriminator", color="#F44336", linewidth=1.5)
    ax_d.set_xlabel("step")
    ax_d.set_ylabel("adversarial loss")
    ax_d.legend(loc="upper right", fontsize=9, framealpha=0.9)
    ax_d.grid(alpha=0.3)
    fig.suptitle(f"{title} ({len(reports)} steps)", fontsize=13, fontweight="bold")
    fig.tight_layout()
    if save_path:
        Path(save_path).parent.mkdir(parents=True, exist_ok=True)
        fig.savefig(save_path, dpi=150, bbox_inches="tight", facecolor="white")
        logger.info(f"✓ Loss plot saved to: {save_path}")
    plt.close(fig)
    return fig
