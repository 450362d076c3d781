"""2D-2D pixel correspondence generation between a reference image and the
current observation: a classical Harris/patch matcher, a landmark-id oracle
matcher for simulator frames, and CSV ingestion of externally computed
correspondences."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .dataio import read_csv_rows
from .errors import OutOfBounds


@dataclass(frozen=True)
class Correspondence:
    uv_ref: np.ndarray
    uv_query: np.ndarray
    confidence: float


@dataclass
class MatchSet:
    """Correspondences against one reference image; at most one match per
    query pixel."""

    reference_node_id: int = -1
    correspondences: list = field(default_factory=list)

    def __post_init__(self):
        keys = {tuple(np.asarray(c.uv_query, dtype=float)) for c in self.correspondences}
        if len(keys) != len(self.correspondences):
            raise ValueError("duplicate query pixels in match set")

    def __len__(self):
        return len(self.correspondences)

    def arrays(self):
        """(uv_ref (N,2), uv_query (N,2), confidence (N,)) as float arrays."""
        n = len(self.correspondences)
        if n == 0:
            return np.zeros((0, 2)), np.zeros((0, 2)), np.zeros(0)
        uv_r = np.array([c.uv_ref for c in self.correspondences], dtype=float)
        uv_q = np.array([c.uv_query for c in self.correspondences], dtype=float)
        conf = np.array([c.confidence for c in self.correspondences], dtype=float)
        return uv_r, uv_q, conf


@dataclass(frozen=True)
class MatchParams:
    max_corners: int = 500
    nms_radius: int = 5
    ratio: float = 0.8
    patch_size: int = 11
    harris_k: float = 0.04
    response_floor: float = 1e-4   # fraction of the max response


def _to_float_image(image) -> np.ndarray:
    img = np.asarray(image)
    imgf = img.astype(np.float64)
    if img.dtype == np.uint8:
        imgf = imgf / 255.0
    return imgf


def harris_corners(image, params: MatchParams = MatchParams()) -> np.ndarray:
    """Top corners by Harris response with non-max suppression.

    Returns (N, 2) integer pixel coordinates (u, v), ordered by descending
    response with (v, u) tie-break, N <= max_corners. Corners closer than
    half a patch to the border are discarded.
    """
    imgf = _to_float_image(image)
    gy, gx = np.gradient(imgf)
    win = 2 * 2 + 1
    sxx = ndimage.uniform_filter(gx * gx, size=win)
    syy = ndimage.uniform_filter(gy * gy, size=win)
    sxy = ndimage.uniform_filter(gx * gy, size=win)
    resp = (sxx * syy - sxy * sxy) - params.harris_k * (sxx + syy) ** 2

    size = 2 * params.nms_radius + 1
    is_peak = (resp == ndimage.maximum_filter(resp, size=size))
    floor = params.response_floor * float(resp.max()) if resp.max() > 0 else np.inf
    is_peak &= resp > floor
    margin = params.patch_size // 2
    is_peak[:margin, :] = False
    is_peak[-margin:, :] = False
    is_peak[:, :margin] = False
    is_peak[:, -margin:] = False

    vs, us = np.nonzero(is_peak)
    if len(vs) == 0:
        return np.zeros((0, 2), dtype=np.int64)
    order = np.lexsort((us, vs, -resp[vs, us]))[:params.max_corners]
    return np.stack([us[order], vs[order]], axis=1).astype(np.int64)


def _patch_descriptors(imgf: np.ndarray, corners: np.ndarray, patch: int):
    """Zero-mean unit-norm patches; drops textureless corners."""
    half = patch // 2
    descs, kept = [], []
    for i, (u, v) in enumerate(corners):
        p = imgf[v - half:v + half + 1, u - half:u + half + 1].ravel()
        p = p - p.mean()
        n = np.linalg.norm(p)
        if n < 1e-9:
            continue
        descs.append(p / n)
        kept.append(i)
    if not descs:
        return np.zeros((0, patch * patch)), np.zeros(0, dtype=np.int64)
    return np.stack(descs), np.array(kept, dtype=np.int64)


def match_classical(obs_ref, obs_query,
                    params: MatchParams = MatchParams()) -> MatchSet:
    """Harris corners + normalized-patch mutual nearest neighbor matching
    with a Lowe ratio test. Deterministic; an empty MatchSet is a valid
    outcome on featureless input."""
    img_ref = obs_ref.color if hasattr(obs_ref, "color") else obs_ref
    img_query = obs_query.color if hasattr(obs_query, "color") else obs_query
    ref_f = _to_float_image(img_ref)
    qry_f = _to_float_image(img_query)
    corners_r = harris_corners(img_ref, params)
    corners_q = harris_corners(img_query, params)
    desc_r, keep_r = _patch_descriptors(ref_f, corners_r, params.patch_size)
    desc_q, keep_q = _patch_descriptors(qry_f, corners_q, params.patch_size)
    if len(desc_r) == 0 or len(desc_q) == 0:
        return MatchSet()
    corners_r = corners_r[keep_r]
    corners_q = corners_q[keep_q]

    ncc = desc_q @ desc_r.T                   # (nq, nr), unit patches
    d2 = np.maximum(2.0 - 2.0 * ncc, 0.0)     # squared L2 distance
    best_r = np.argmin(d2, axis=1)
    best_q_for_r = np.argmin(d2, axis=0)

    matches = []
    for j in range(d2.shape[0]):
        i = best_r[j]
        if best_q_for_r[i] != j:
            continue
        row = d2[j]
        d_best = row[i]
        row_rest = np.delete(row, i)
        if row_rest.size:
            d_second = row_rest.min()
            if np.sqrt(d_best) >= params.ratio * np.sqrt(d_second):
                continue
        matches.append((corners_q[j], corners_r[i], max(0.0, float(ncc[j, i]))))

    matches.sort(key=lambda m: (m[0][1], m[0][0]))
    return MatchSet(correspondences=[
        Correspondence(uv_ref=np.array(r, dtype=float),
                       uv_query=np.array(q, dtype=float),
                       confidence=c)
        for q, r, c in matches
    ])


def match_oracle(frame_ref, frame_query, outlier_rate: float = 0.0,
                 noise_px: float = 0.0, seed: int = 0) -> MatchSet:
    """Ground-truth matcher over simulator landmark annotations.

    Pairs pixels observing the same landmark id, perturbs query pixels with
    Gaussian noise of sigma ``noise_px``, then replaces exactly
    ``floor(outlier_rate * n)`` of them with uniform random pixels. Fully
    deterministic given the seed.
    """
    if not 0.0 <= outlier_rate < 1.0:
        raise ValueError("outlier_rate must lie in [0, 1)")
    if frame_ref.landmark_ids is None or frame_query.landmark_ids is None:
        raise ValueError("oracle matcher needs landmark annotations")
    ids_r = np.asarray(frame_ref.landmark_ids)
    ids_q = np.asarray(frame_query.landmark_ids)
    height, width = np.asarray(frame_query.color).shape

    common, idx_r, idx_q = np.intersect1d(ids_r, ids_q, return_indices=True)
    uv_r = np.asarray(frame_ref.landmark_uv, dtype=float)[idx_r]
    uv_q = np.asarray(frame_query.landmark_uv, dtype=float)[idx_q].copy()

    rng = np.random.default_rng(seed)
    if noise_px > 0.0 and len(uv_q):
        uv_q += rng.normal(0.0, noise_px, uv_q.shape)
    n_out = int(np.floor(outlier_rate * len(uv_q)))
    if n_out > 0:
        corrupt = rng.choice(len(uv_q), size=n_out, replace=False)
        uv_q[corrupt, 0] = rng.uniform(0.0, width - 1.0, n_out)
        uv_q[corrupt, 1] = rng.uniform(0.0, height - 1.0, n_out)
    uv_q[:, 0] = np.clip(uv_q[:, 0], 0.0, width - 1e-6)
    uv_q[:, 1] = np.clip(uv_q[:, 1], 0.0, height - 1e-6)

    # duplicate query pixels after corruption are theoretically possible
    # but measure zero; drop later duplicates defensively
    seen = set()
    corr = []
    for i in range(len(uv_q)):
        key = (uv_q[i, 0], uv_q[i, 1])
        if key in seen:
            continue
        seen.add(key)
        corr.append(Correspondence(uv_ref=uv_r[i].copy(), uv_query=uv_q[i].copy(),
                                   confidence=1.0))
    return MatchSet(correspondences=corr)


MATCH_CSV_HEADER = "u_ref,v_ref,u_query,v_query,confidence"


def write_matches(path, match_set: MatchSet) -> None:
    def fmt9(x):
        return format(float(x), ".9g")

    with open(path, "w") as f:
        f.write(MATCH_CSV_HEADER + "\n")
        for c in match_set.correspondences:
            f.write(",".join(fmt9(v) for v in
                             (c.uv_ref[0], c.uv_ref[1], c.uv_query[0],
                              c.uv_query[1], c.confidence)) + "\n")


def ingest_matches(path, width: int, height: int) -> MatchSet:
    """Parse a match CSV, validating every pixel against the image bounds."""
    corr = []
    for lineno, row in read_csv_rows(path, MATCH_CSV_HEADER):
        if len(row) != 5:
            raise OutOfBounds(f"{path}:{lineno}: expected 5 fields, got {len(row)}")
        ur, vr, uq, vq, conf = (float(v) for v in row)
        for name, u, v in (("ref", ur, vr), ("query", uq, vq)):
            if not (0.0 <= u < width and 0.0 <= v < height):
                raise OutOfBounds(
                    f"{path}:{lineno}: {name} pixel ({u}, {v}) outside "
                    f"{width}x{height}"
                )
        corr.append(Correspondence(uv_ref=np.array([ur, vr]),
                                   uv_query=np.array([uq, vq]),
                                   confidence=conf))
    return MatchSet(correspondences=corr)
