"""Edit task construction.

Each editing intent (move, resize, replace appearance, paste, drag points)
is compiled into an EditSpec: the four masks, a pairing map aligning source
and target cells, the similarity mode, and whether a reference image is
involved. Guidance never sees raw user input, only validated EditSpecs.

Coordinates are (row, col) = (y, x); offsets are (dy, dx). The JSON wire
format (see `to_payload` / `from_payload`) carries raw user inputs - object
masks, offsets, points - and derived masks are always rebuilt here, so the
core stays the single source of truth for mask algebra.
"""

from __future__ import annotations

import base64
import io
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from . import masks as M
from .errors import ContractError
from .masks import Mask

KINDS = ("moving", "resizing", "replacing", "pasting", "dragging")
SCHEMA_VERSION = 1

# Cross-image tasks read the reference stream for the edit term.
REFERENCE_KINDS = frozenset({"replacing", "pasting"})


@dataclass(frozen=True)
class PairingMap:
    """Geometric alignment between selected cells of m_gud and m_gen."""

    kind: str  # "identity" | "translation" | "scale" | "rank" | "points"
    offset: tuple[int, int] = (0, 0)
    gamma: Optional[float] = None
    center: Optional[tuple[float, float]] = None  # scale anchor, image resolution
    point_pairs: tuple[tuple[tuple[int, int], tuple[int, int]], ...] = ()


@dataclass(frozen=True)
class DragPointSet:
    """(source, destination) pixel pairs plus the user's keep-unchanged mask."""

    pairs: tuple[tuple[tuple[int, int], tuple[int, int]], ...]
    m_share: Mask

    def __post_init__(self):
        h, w = self.m_share.shape
        for src, dst in self.pairs:
            for y, x in (src, dst):
                if not (0 <= y < h and 0 <= x < w):
                    raise ContractError(f"drag point ({y},{x}) outside {h}x{w} image")
        if not self.pairs:
            raise ContractError("drag point set is empty")


@dataclass(frozen=True)
class EditSpec:
    kind: str
    m_gud: Optional[Mask]
    m_gen: Optional[Mask]
    m_share: Optional[Mask]
    m_ipt: Optional[Mask]
    m_ref: Optional[Mask]
    pairing: PairingMap
    similarity_mode: str  # "local" | "global"
    uses_reference_image: bool
    gamma: Optional[float] = None
    drag_points: Optional[DragPointSet] = None
    weight_overrides: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ContractError(f"unknown task kind {self.kind!r}")
        if self.gamma is not None and self.gamma <= 0:
            raise ContractError("scale factor gamma must be > 0")
        shapes = {
            m.shape for m in (self.m_gud, self.m_gen, self.m_share, self.m_ipt, self.m_ref)
            if m is not None
        }
        if len(shapes) > 1:
            raise ContractError(f"masks disagree on image resolution: {sorted(shapes)}")

    @property
    def image_shape(self) -> tuple[int, int]:
        for m in (self.m_gud, self.m_gen, self.m_share, self.m_ipt, self.m_ref):
            if m is not None:
                return m.shape
        raise ContractError("edit spec carries no masks")


# ---------------------------------------------------------------------------
# builders
# ---------------------------------------------------------------------------


def _default_reference_ring(m_ipt: Mask, exclude: Mask, max_radius: int = 4) -> Mask:
    """Background ring around the uncovered region, used when the caller gives
    no appearance reference. Grows until nonempty."""
    for radius in range(1, max_radius + 1):
        ring = M.difference(M.difference(M.dilate(m_ipt, radius), m_ipt), exclude)
        if not ring.is_empty():
            return ring
    raise ContractError("could not derive a nonempty reference region around the move")


def build_moving(
    object_mask: Mask,
    offset: tuple[int, int],
    reference_region: Optional[Mask] = None,
) -> EditSpec:
    """Move the object under `object_mask` by (dy, dx)."""
    if object_mask.is_empty():
        raise ContractError("object mask is empty")
    if reference_region is not None and reference_region.is_empty():
        raise ContractError("reference region is empty")
    m_gud = object_mask
    m_gen = M.translate(m_gud, offset)
    m_share = M.complement(M.union(m_gen, m_gud))
    m_ipt = M.difference(m_gud, m_gen)
    m_ref = reference_region
    if m_ref is None and not m_ipt.is_empty():
        m_ref = _default_reference_ring(m_ipt, M.union(m_gen, m_gud))
    return EditSpec(
        kind="moving",
        m_gud=m_gud,
        m_gen=m_gen,
        m_share=m_share,
        m_ipt=m_ipt,
        m_ref=m_ref,
        pairing=PairingMap(kind="translation", offset=tuple(offset)),
        similarity_mode="local",
        uses_reference_image=False,
    )


def _zoom_mask_nearest(data: np.ndarray, out_hw: tuple[int, int]) -> np.ndarray:
    """Nearest-neighbor resize of a binary mask to an arbitrary grid."""
    gh, gw = out_hw
    h, w = data.shape
    ys = np.minimum((np.arange(gh) * h / gh).astype(int), h - 1)
    xs = np.minimum((np.arange(gw) * w / gw).astype(int), w - 1)
    return data[np.ix_(ys, xs)]


def _scaled_placement(
    m_gud: Mask, gamma: float, offset: tuple[int, int]
) -> tuple[Mask, tuple[int, int], tuple[int, int]]:
    """Zoom m_gud by gamma and place it so the object's bounding-box center
    stays put (plus offset). Returns (m_gen, integer shift zoomed->grid,
    zoomed grid size). Cells of the zoomed object that fall outside the grid
    are cropped; for gamma < 1 the vacant border simply stays unselected."""
    h, w = m_gud.shape
    gh = max(1, round(gamma * h))
    gw = max(1, round(gamma * w))
    zoomed = _zoom_mask_nearest(m_gud.data, (gh, gw))
    cy, cx = M.bbox_center(m_gud)
    # Where the object center lands inside the zoomed grid.
    zy = (gh / h) * (cy + 0.5) - 0.5
    zx = (gw / w) * (cx + 0.5) - 0.5
    shift = (round(cy + offset[0] - zy), round(cx + offset[1] - zx))
    out = np.zeros((h, w), dtype=bool)
    qs = np.stack(np.nonzero(zoomed), axis=1)
    ps = qs + np.array(shift)
    keep = (ps[:, 0] >= 0) & (ps[:, 0] < h) & (ps[:, 1] >= 0) & (ps[:, 1] < w)
    out[ps[keep, 0], ps[keep, 1]] = True
    return Mask(out, m_gud.resolution_tag), shift, (gh, gw)


def build_resizing(
    object_mask: Mask,
    gamma: float,
    offset: tuple[int, int] = (0, 0),
    reference_region: Optional[Mask] = None,
) -> EditSpec:
    """Rescale the object by gamma (and optionally move it)."""
    if gamma <= 0:
        raise ContractError("scale factor gamma must be > 0")
    if object_mask.is_empty():
        raise ContractError("object mask is empty")
    if reference_region is not None and reference_region.is_empty():
        raise ContractError("reference region is empty")
    m_gud = object_mask
    m_gen, _, _ = _scaled_placement(m_gud, gamma, offset)
    m_share = M.complement(M.union(m_gen, m_gud))
    m_ipt = M.difference(m_gud, m_gen)
    m_ref = reference_region
    if m_ref is None and not m_ipt.is_empty():
        m_ref = _default_reference_ring(m_ipt, M.union(m_gen, m_gud))
    return EditSpec(
        kind="resizing",
        m_gud=m_gud,
        m_gen=m_gen,
        m_share=m_share,
        m_ipt=m_ipt,
        m_ref=m_ref,
        pairing=PairingMap(
            kind="scale",
            offset=tuple(offset),
            gamma=float(gamma),
            center=M.bbox_center(m_gud),
        ),
        similarity_mode="local",
        uses_reference_image=False,
        gamma=float(gamma),
    )


def build_replacing(m_gen_object: Mask, m_gud_reference: Mask) -> EditSpec:
    """Replace the appearance of the object at m_gen with the reference
    object at m_gud (a mask in the reference image). Regions are compared by
    their mean feature, so the two masks may differ in cell count."""
    if m_gen_object.is_empty() or m_gud_reference.is_empty():
        raise ContractError("replacing needs nonempty object and reference masks")
    return EditSpec(
        kind="replacing",
        m_gud=m_gud_reference,
        m_gen=m_gen_object,
        m_share=M.complement(m_gen_object),
        m_ipt=None,
        m_ref=None,
        pairing=PairingMap(kind="identity"),
        similarity_mode="global",
        uses_reference_image=True,
    )


def build_pasting(m_gud_in_reference: Mask, m_gen_target_position: Mask) -> EditSpec:
    """Paste the reference-image object at the target position."""
    if m_gud_in_reference.count != m_gen_target_position.count:
        raise ContractError(
            f"pasting masks must pair cell-for-cell: reference has "
            f"{m_gud_in_reference.count} cells, target has {m_gen_target_position.count}"
        )
    if m_gud_in_reference.is_empty():
        raise ContractError("pasting masks are empty")
    return EditSpec(
        kind="pasting",
        m_gud=m_gud_in_reference,
        m_gen=m_gen_target_position,
        m_share=M.complement(m_gen_target_position),
        m_ipt=None,
        m_ref=None,
        # Row-major rank order pairs the two equal-count regions; for masks
        # that are exact translates this is the translation pairing.
        pairing=PairingMap(kind="rank"),
        similarity_mode="local",
        uses_reference_image=True,
    )


def _patch_offsets(
    src: tuple[int, int], dst: tuple[int, int], shape: tuple[int, int]
) -> list[tuple[int, int]]:
    """3x3 patch offsets surviving symmetric border clipping: an offset is
    kept only if both the source and the destination cell stay in bounds."""
    h, w = shape
    kept = []
    for dy in (-1, 0, 1):
        for dx in (-1, 0, 1):
            ok = all(
                0 <= p[0] + dy < h and 0 <= p[1] + dx < w for p in (src, dst)
            )
            if ok:
                kept.append((dy, dx))
    return kept


def build_dragging(points: DragPointSet) -> EditSpec:
    """Drag image content point-to-point; each point contributes a 3x3 patch."""
    shape = points.m_share.shape
    gud = np.zeros(shape, dtype=bool)
    gen = np.zeros(shape, dtype=bool)
    for (sy, sx), (dy_, dx_) in points.pairs:
        for oy, ox in _patch_offsets((sy, sx), (dy_, dx_), shape):
            gud[sy + oy, sx + ox] = True
            gen[dy_ + oy, dx_ + ox] = True
    return EditSpec(
        kind="dragging",
        m_gud=Mask(gud),
        m_gen=Mask(gen),
        m_share=points.m_share,
        m_ipt=None,
        m_ref=None,
        pairing=PairingMap(kind="points", point_pairs=points.pairs),
        similarity_mode="local",
        uses_reference_image=False,
        drag_points=points,
    )


# ---------------------------------------------------------------------------
# per-layer geometry
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LocalPairs:
    """Aligned cell sets for one feature layer.

    gen_cells index the generated-side feature grid. gud_cells index either
    the guided feature grid directly, or - when gud_zoom_size is set - the
    guided features after interpolation to that size (the resizing task).
    """

    gen_cells: np.ndarray  # [n, 2] int
    gud_cells: np.ndarray  # [n, 2] int
    gud_zoom_size: Optional[tuple[int, int]] = None

    @property
    def count(self) -> int:
        return int(self.gen_cells.shape[0])


@dataclass(frozen=True)
class LayerGeometry:
    """Everything guidance needs about one decoder layer's grid."""

    layer: int
    scale: int  # image pixels per feature cell
    shape: tuple[int, int]
    edit_pairs: Optional[LocalPairs]  # local-mode edit term; None for global mode
    m_gen: Optional[Mask]
    m_gud: Optional[Mask]
    m_share: Optional[Mask]
    m_ipt: Optional[Mask]
    m_ref: Optional[Mask]
    flags: dict


def downsample_masks(spec: EditSpec, scale: int) -> dict:
    """All of a spec's masks at one feature resolution, plus emptiness flags."""
    out: dict = {"flags": {}}
    for name in ("m_gen", "m_gud", "m_share", "m_ipt", "m_ref"):
        m = getattr(spec, name)
        if m is None:
            out[name] = None
            continue
        d = M.downsample(m, scale)
        out[name] = d
        if d.is_empty() and not m.is_empty():
            out["flags"][name] = "empty_after_downsample"
    return out


def _rank_pairs(gen: Mask, gud: Mask) -> LocalPairs:
    gen_cells = M.cells(gen)
    gud_cells = M.cells(gud)
    n = min(len(gen_cells), len(gud_cells))
    return LocalPairs(gen_cells[:n], gud_cells[:n])


def _translation_pairs(
    gud_layer: Mask, offset: tuple[int, int], scale: int
) -> LocalPairs:
    dy, dx = round(offset[0] / scale), round(offset[1] / scale)
    h, w = gud_layer.shape
    gud_cells = M.cells(gud_layer)
    gen_cells = gud_cells + np.array([dy, dx])
    keep = (
        (gen_cells[:, 0] >= 0)
        & (gen_cells[:, 0] < h)
        & (gen_cells[:, 1] >= 0)
        & (gen_cells[:, 1] < w)
    )
    return LocalPairs(gen_cells[keep], gud_cells[keep])


def _scale_pairs(
    gud_layer: Mask, gamma: float, offset: tuple[int, int], scale: int
) -> Optional[LocalPairs]:
    if gud_layer.is_empty():
        return None
    off = (offset[0] / scale, offset[1] / scale)
    h, w = gud_layer.shape
    gh = max(1, round(gamma * h))
    gw = max(1, round(gamma * w))
    zoomed = _zoom_mask_nearest(gud_layer.data, (gh, gw))
    cy, cx = M.bbox_center(gud_layer)
    zy = (gh / h) * (cy + 0.5) - 0.5
    zx = (gw / w) * (cx + 0.5) - 0.5
    shift = (round(cy + off[0] - zy), round(cx + off[1] - zx))
    qs = np.stack(np.nonzero(zoomed), axis=1)
    if len(qs) == 0:
        return None
    ps = qs + np.array(shift)
    keep = (ps[:, 0] >= 0) & (ps[:, 0] < h) & (ps[:, 1] >= 0) & (ps[:, 1] < w)
    if not keep.any():
        return None
    return LocalPairs(ps[keep], qs[keep], gud_zoom_size=(gh, gw))


def _point_pairs(
    points: DragPointSet, scale: int, shape: tuple[int, int]
) -> Optional[LocalPairs]:
    gen_cells: list[tuple[int, int]] = []
    gud_cells: list[tuple[int, int]] = []
    for (sy, sx), (dy_, dx_) in points.pairs:
        src = (sy // scale, sx // scale)
        dst = (dy_ // scale, dx_ // scale)
        for oy, ox in _patch_offsets(src, dst, shape):
            gud_cells.append((src[0] + oy, src[1] + ox))
            gen_cells.append((dst[0] + oy, dst[1] + ox))
    if not gen_cells:
        return None
    return LocalPairs(np.array(gen_cells), np.array(gud_cells))


def materialize_layer(spec: EditSpec, layer: int, scale: int) -> LayerGeometry:
    """Project a spec onto one decoder layer's grid."""
    down = downsample_masks(spec, scale)
    shape = (spec.image_shape[0] // scale, spec.image_shape[1] // scale)
    pairs: Optional[LocalPairs] = None
    if spec.similarity_mode == "local":
        p = spec.pairing
        if p.kind == "translation":
            pairs = _translation_pairs(down["m_gud"], p.offset, scale)
        elif p.kind == "scale":
            pairs = _scale_pairs(down["m_gud"], p.gamma, p.offset, scale)
        elif p.kind == "rank":
            pairs = _rank_pairs(down["m_gen"], down["m_gud"])
        elif p.kind == "points":
            pairs = _point_pairs(spec.drag_points, scale, shape)
        else:
            raise ContractError(f"pairing kind {p.kind!r} unsupported in local mode")
        if pairs is not None and pairs.count == 0:
            pairs = None
        if pairs is None:
            down["flags"]["edit_pairs"] = "empty_after_downsample"
    return LayerGeometry(
        layer=layer,
        scale=scale,
        shape=shape,
        edit_pairs=pairs,
        m_gen=down["m_gen"],
        m_gud=down["m_gud"],
        m_share=down["m_share"],
        m_ipt=down["m_ipt"],
        m_ref=down["m_ref"],
        flags=down["flags"],
    )


def materialize_layers(spec: EditSpec, profile, layers) -> dict[int, LayerGeometry]:
    image_hw = spec.image_shape
    return {
        l: materialize_layer(spec, l, profile.scale_for_layer(l, image_hw))
        for l in sorted(layers)
    }


# ---------------------------------------------------------------------------
# wire format
# ---------------------------------------------------------------------------
#
# Versioned JSON, raw user inputs only (derived masks are rebuilt on load):
#
#   {"v": 1, "kind": "moving",
#    "masks":   {"object": "<base64 PNG>", "reference": "...", "share": "..."},
#    "offset":  [dy, dx],
#    "gamma":   1.5,
#    "points":  [{"src": [y, x], "dst": [y, x]}, ...],
#    "weights": {"w_e": 1.0, ...}}
#
# Mask PNGs are single-channel 8-bit, 0 = off, 255 = on.


class SpecValidationError(ContractError):
    """Invalid edit payload, with per-field diagnostics."""

    def __init__(self, errors: list[dict]):
        super().__init__("; ".join(f"{e['field']}: {e['message']}" for e in errors))
        self.errors = errors


def mask_to_png_b64(m: Mask) -> str:
    from PIL import Image

    img = Image.fromarray((m.data.astype(np.uint8)) * 255, mode="L")
    buf = io.BytesIO()
    img.save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode("ascii")


def mask_from_png_b64(b64: str, field_name: str = "mask") -> Mask:
    from PIL import Image

    try:
        raw = base64.b64decode(b64, validate=True)
        img = Image.open(io.BytesIO(raw))
        img.load()
    except Exception as exc:
        raise SpecValidationError(
            [{"field": field_name, "message": f"not a decodable PNG: {exc}"}]
        )
    if img.mode != "L":
        img = img.convert("L")
    arr = np.asarray(img)
    if not np.all(np.isin(np.unique(arr), (0, 255))):
        raise SpecValidationError(
            [{"field": field_name, "message": "mask PNG must contain only 0 and 255"}]
        )
    return Mask(arr > 0)


def to_payload(spec: EditSpec) -> dict:
    """Serialize to the raw-inputs wire form."""
    payload: dict = {"v": SCHEMA_VERSION, "kind": spec.kind, "masks": {}}
    if spec.kind in ("moving", "resizing"):
        payload["masks"]["object"] = mask_to_png_b64(spec.m_gud)
        payload["offset"] = list(spec.pairing.offset)
        if spec.kind == "resizing":
            payload["gamma"] = spec.gamma
    elif spec.kind == "replacing":
        payload["masks"]["object"] = mask_to_png_b64(spec.m_gen)
        payload["masks"]["reference"] = mask_to_png_b64(spec.m_gud)
    elif spec.kind == "pasting":
        payload["masks"]["reference"] = mask_to_png_b64(spec.m_gud)
        payload["masks"]["target"] = mask_to_png_b64(spec.m_gen)
    elif spec.kind == "dragging":
        payload["points"] = [
            {"src": list(src), "dst": list(dst)} for src, dst in spec.drag_points.pairs
        ]
        payload["masks"]["share"] = mask_to_png_b64(spec.m_share)
    if spec.weight_overrides:
        payload["weights"] = dict(spec.weight_overrides)
    return payload


def _require(payload: dict, errors: list, field_name: str, inner: Optional[str] = None):
    container = payload.get("masks", {}) if inner == "masks" else payload
    key = field_name.split(".")[-1]
    if key not in container or container[key] is None:
        errors.append({"field": field_name, "message": "required for this task kind"})
        return None
    return container[key]


def from_payload(payload: dict) -> EditSpec:
    """Validate + build an EditSpec from the wire form.

    Raises SpecValidationError carrying [{"field", "message"}, ...] so callers
    can surface exact offending fields.
    """
    errors: list[dict] = []
    if not isinstance(payload, dict):
        raise SpecValidationError([{"field": "", "message": "payload must be an object"}])
    if payload.get("v") != SCHEMA_VERSION:
        errors.append({"field": "v", "message": f"unsupported version {payload.get('v')!r}"})
    kind = payload.get("kind")
    if kind not in KINDS:
        errors.append({"field": "kind", "message": f"must be one of {list(KINDS)}"})
        raise SpecValidationError(errors)

    weights = payload.get("weights") or {}
    if not isinstance(weights, dict) or not all(
        isinstance(v, (int, float)) for v in weights.values()
    ):
        errors.append({"field": "weights", "message": "must map names to numbers"})
        weights = {}

    def mask_field(name: str, wire: str) -> Optional[Mask]:
        b64 = _require(payload, errors, f"masks.{wire}", inner="masks")
        if b64 is None:
            return None
        try:
            return mask_from_png_b64(b64, f"masks.{wire}")
        except SpecValidationError as exc:
            errors.extend(exc.errors)
            return None

    spec: Optional[EditSpec] = None
    try:
        if kind in ("moving", "resizing"):
            obj = mask_field("object", "object")
            offset = payload.get("offset")
            if (
                not isinstance(offset, (list, tuple))
                or len(offset) != 2
                or not all(isinstance(v, int) for v in offset)
            ):
                errors.append({"field": "offset", "message": "must be [dy, dx] integers"})
                offset = None
            ref_b64 = (payload.get("masks") or {}).get("reference")
            m_ref = mask_from_png_b64(ref_b64, "masks.reference") if ref_b64 else None
            if obj is not None and offset is not None:
                if kind == "moving":
                    try:
                        spec = build_moving(obj, tuple(offset), m_ref)
                    except ContractError as exc:
                        errors.append({"field": "offset", "message": str(exc)})
                else:
                    gamma = payload.get("gamma")
                    if not isinstance(gamma, (int, float)) or gamma <= 0:
                        errors.append({"field": "gamma", "message": "must be a number > 0"})
                    else:
                        spec = build_resizing(obj, float(gamma), tuple(offset), m_ref)
        elif kind == "replacing":
            obj = mask_field("object", "object")
            ref = mask_field("reference", "reference")
            if obj is not None and ref is not None:
                spec = build_replacing(obj, ref)
        elif kind == "pasting":
            ref = mask_field("reference", "reference")
            tgt = mask_field("target", "target")
            if ref is not None and tgt is not None:
                try:
                    spec = build_pasting(ref, tgt)
                except ContractError as exc:
                    errors.append({"field": "masks.target", "message": str(exc)})
        elif kind == "dragging":
            share = mask_field("share", "share")
            raw_points = payload.get("points")
            pairs = []
            if not isinstance(raw_points, list) or not raw_points:
                errors.append({"field": "points", "message": "must be a nonempty list"})
            else:
                for i, item in enumerate(raw_points):
                    try:
                        src = tuple(int(v) for v in item["src"])
                        dst = tuple(int(v) for v in item["dst"])
                        if len(src) != 2 or len(dst) != 2:
                            raise ValueError("need two coordinates")
                        pairs.append((src, dst))
                    except Exception:
                        errors.append(
                            {"field": f"points[{i}]", "message": "need src/dst as [y, x]"}
                        )
            if share is not None and pairs and not errors:
                try:
                    spec = build_dragging(DragPointSet(tuple(pairs), share))
                except ContractError as exc:
                    errors.append({"field": "points", "message": str(exc)})
    except ContractError as exc:
        errors.append({"field": "masks", "message": str(exc)})

    if errors or spec is None:
        if not errors:
            errors.append({"field": "", "message": "payload did not produce a valid spec"})
        raise SpecValidationError(errors)
    if weights:
        spec = replace(spec, weight_overrides={k: float(v) for k, v in weights.items()})
    return spec
