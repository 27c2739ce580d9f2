"""Detector-response heat maps and box extraction.

A part map rasterizes one detector's sigmoid responses onto a cell grid:
every instance deposits its response on each cell whose center its box
contains, and the map is normalized by its peak.  An object map is the
reliability-weighted convex combination of a category's part maps, where a
detector's reliability on the image is its best sigmoid response.  The
hypothesis box is the bounding box of the largest connected foreground
component.
"""

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from ._kernels import heat_accumulate
from .dataset import write_atomic
from .errors import CapabilityError
from .numerics import sigmoid

FOUR_CONNECTED = np.array(
    [[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=np.int64
)

TAXONOMY = ("correct", "hyp_in_gt", "gt_in_hyp", "no_overlap", "low_overlap")


@dataclass
class HeatMap:
    """Cell grid plus the geometry needed to map cells back to pixels.

    Cell (i, j) covers pixels [j*stride, (j+1)*stride) x [i*stride,
    (i+1)*stride), clipped to the image; its center is ((j+0.5)*stride,
    (i+0.5)*stride)."""

    grid: np.ndarray
    stride: int
    width: int
    height: int


def grid_shape(width, height, stride):
    return (
        int(np.ceil(height / stride)),
        int(np.ceil(width / stride)),
    )


def response_heat_map(boxes, responses, width, height, stride):
    """Accumulate sigmoid responses over covered cells and normalize.

    Containment is half-open: a cell belongs to a box when x0 <= cx < x1
    and y0 <= cy < y1 for its center (cx, cy).  The peak cell is scaled to
    1; a map no box touches stays all zero.
    """
    boxes = np.asarray(boxes, dtype=np.float64)
    responses = np.asarray(responses, dtype=np.float64)
    n_rows, n_cols = grid_shape(width, height, stride)
    cy = (np.arange(n_rows) + 0.5) * stride
    cx = (np.arange(n_cols) + 0.5) * stride
    grid = np.zeros((n_rows, n_cols))
    sig = np.atleast_1d(sigmoid(responses))

    row_lo = []
    row_hi = []
    col_lo = []
    col_hi = []
    vals = []
    for m in range(boxes.shape[0]):
        x0, y0, x1, y1 = boxes[m]
        rows = np.nonzero((y0 <= cy) & (cy < y1))[0]
        cols = np.nonzero((x0 <= cx) & (cx < x1))[0]
        if rows.shape[0] == 0 or cols.shape[0] == 0:
            continue
        row_lo.append(rows[0])
        row_hi.append(rows[-1] + 1)
        col_lo.append(cols[0])
        col_hi.append(cols[-1] + 1)
        vals.append(sig[m])
    if vals:
        heat_accumulate(
            grid,
            np.asarray(row_lo, dtype=np.int64),
            np.asarray(row_hi, dtype=np.int64),
            np.asarray(col_lo, dtype=np.int64),
            np.asarray(col_hi, dtype=np.int64),
            np.asarray(vals, dtype=np.float64),
        )
    peak = float(grid.max()) if grid.size else 0.0
    if peak > 0.0:
        grid /= peak
    return HeatMap(grid=grid, stride=stride, width=width, height=height)


def _require_boxes(dataset, image):
    im = dataset.images[image]
    if im.boxes is None:
        raise CapabilityError(
            f"image '{im.image_id}' has no instance boxes; heat maps need "
            "geometry"
        )
    return im


def part_map(dataset, image, model, stride=4):
    """Normalized heat map of one detector on one image."""
    im = _require_boxes(dataset, image)
    responses = model.response(dataset.features_of(image))
    return response_heat_map(im.boxes, responses, im.width, im.height, stride)


def object_map(dataset, image, models, stride=4):
    """Reliability-weighted convex combination of the detectors' part maps.

    A detector's reliability is its best sigmoid response on the image
    (always positive, so the combination is well defined).  Returns the
    combined HeatMap and the reliability vector.
    """
    if not models:
        raise ValueError("object_map needs at least one detector")
    im = _require_boxes(dataset, image)
    F = dataset.features_of(image)
    total = None
    rel = np.empty(len(models))
    for t, model in enumerate(models):
        responses = model.response(F)
        rel[t] = float(np.max(np.atleast_1d(sigmoid(responses))))
        part = response_heat_map(
            im.boxes, responses, im.width, im.height, stride
        )
        contrib = rel[t] * part.grid
        total = contrib if total is None else total + contrib
    grid = total / rel.sum()
    return HeatMap(grid=grid, stride=stride, width=im.width, height=im.height), rel


@dataclass
class BoxHypothesis:
    """Extracted box in pixel coordinates; ``fallback`` marks the degenerate
    single-cell answer used when no cell clears the threshold."""

    box: tuple
    fallback: bool


def extract_box(heat, fg_threshold=0.8):
    """Bounding box of the largest 4-connected foreground component.

    Foreground is every cell at or above ``fg_threshold`` of the map's peak.
    Area ties pick the component whose bounding box is topmost, then
    leftmost.  A map with no positive cell falls back to the first peak cell
    and is flagged.
    """
    grid = heat.grid
    peak = float(grid.max()) if grid.size else 0.0
    if peak <= 0.0:
        r, c = np.unravel_index(int(np.argmax(grid)), grid.shape)
        return BoxHypothesis(box=_cells_to_box(heat, r, r, c, c), fallback=True)
    mask = grid >= fg_threshold * peak
    labeled, n_comp = ndimage.label(mask, structure=FOUR_CONNECTED)
    best = None
    for comp in range(1, n_comp + 1):
        rows, cols = np.nonzero(labeled == comp)
        area = rows.shape[0]
        key = (-area, int(rows.min()), int(cols.min()))
        if best is None or key < best[0]:
            best = (
                key,
                (int(rows.min()), int(rows.max()), int(cols.min()), int(cols.max())),
            )
    r0, r1, c0, c1 = best[1]
    return BoxHypothesis(box=_cells_to_box(heat, r0, r1, c0, c1), fallback=False)


def _cells_to_box(heat, r0, r1, c0, c1):
    x0 = c0 * heat.stride
    y0 = r0 * heat.stride
    x1 = min((c1 + 1) * heat.stride, heat.width)
    y1 = min((r1 + 1) * heat.stride, heat.height)
    return (float(x0), float(y0), float(x1), float(y1))


def iou(box_a, box_b):
    """Intersection over union of two (x0, y0, x1, y1) boxes."""
    ax0, ay0, ax1, ay1 = box_a
    bx0, by0, bx1, by1 = box_b
    iw = min(ax1, bx1) - max(ax0, bx0)
    ih = min(ay1, by1) - max(ay0, by0)
    if iw <= 0.0 or ih <= 0.0:
        return 0.0
    inter = iw * ih
    union = (ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter
    return float(inter / union)


def _inside(inner, outer):
    return (
        inner[0] >= outer[0]
        and inner[1] >= outer[1]
        and inner[2] <= outer[2]
        and inner[3] <= outer[3]
    )


def classify_localization(hypothesis, gt_boxes):
    """Five-way outcome of a hypothesis against the image's truth boxes.

    Checked in order: correct (IoU >= 0.5 with some truth box), hypothesis
    inside some truth box, some truth box inside the hypothesis, zero
    overlap with every truth box, and otherwise low overlap.  Exactly one
    class applies.
    """
    if not gt_boxes:
        raise ValueError("classify_localization needs at least one truth box")
    if any(iou(hypothesis, gt) >= 0.5 for gt in gt_boxes):
        return "correct"
    if any(_inside(hypothesis, gt) for gt in gt_boxes):
        return "hyp_in_gt"
    if any(_inside(gt, hypothesis) for gt in gt_boxes):
        return "gt_in_hyp"
    if all(iou(hypothesis, gt) == 0.0 for gt in gt_boxes):
        return "no_overlap"
    return "low_overlap"


@dataclass
class CorLocReport:
    """Per-category correct-localization fractions and outcome counts."""

    per_category: dict      # category -> fraction correct
    taxonomy: dict          # category -> {outcome: count}
    per_image: list         # (image_id, category, outcome, iou_best)

    def overall(self):
        counts = [sum(t.values()) for t in self.taxonomy.values()]
        correct = [
            t.get("correct", 0) for t in self.taxonomy.values()
        ]
        total = sum(counts)
        return sum(correct) / total if total else 0.0


def corloc(hypotheses, truth_boxes):
    """Score localization hypotheses against per-image truth boxes.

    ``hypotheses``: iterable of (image_id, category, box); ``truth_boxes``:
    mapping image_id -> list of truth boxes for that image's category.
    Images absent from the mapping are skipped.
    """
    per_category = {}
    taxonomy = {}
    per_image = []
    tallies = {}
    for image_id, category, box in hypotheses:
        gts = truth_boxes.get(image_id)
        if not gts:
            continue
        outcome = classify_localization(box, gts)
        best = max(iou(box, gt) for gt in gts)
        per_image.append((image_id, category, outcome, best))
        cat_tally = tallies.setdefault(category, {})
        cat_tally[outcome] = cat_tally.get(outcome, 0) + 1
    for category, tally in sorted(tallies.items()):
        total = sum(tally.values())
        per_category[category] = tally.get("correct", 0) / total
        taxonomy[category] = {
            outcome: tally.get(outcome, 0) for outcome in TAXONOMY
        }
    return CorLocReport(
        per_category=per_category, taxonomy=taxonomy, per_image=per_image
    )


def save_pgm(heat, path):
    """Write the map as a binary PGM (P5), values scaled to 0..255."""
    grid = np.clip(heat.grid, 0.0, 1.0)
    data = np.rint(grid * 255.0).astype(np.uint8)
    header = f"P5\n{grid.shape[1]} {grid.shape[0]}\n255\n".encode("ascii")
    write_atomic(path, header + data.tobytes(order="C"))
