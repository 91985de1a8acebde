"""Patch correspondence between source and target feature maps.

Patches are k x k windows taken with stride s, flattened channel-major
(``C, k, k`` order). Similarities are cosine similarities of those flattened
vectors. All argmax / top-k selections break ties toward the smaller index.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import as_tensor, cosine_matrix

OVERLAP_EPS = 1e-8


@dataclass(frozen=True)
class GridGeom:
    k: int
    s: int
    H: int
    W: int

    @property
    def n_y(self) -> int:
        return (self.H - self.k) // self.s + 1

    @property
    def n_x(self) -> int:
        return (self.W - self.k) // self.s + 1

    @property
    def N(self) -> int:
        return self.n_y * self.n_x

    def origins(self) -> np.ndarray:
        """(N, 2) array of (y, x) top-left corners in patch order."""
        j = np.arange(self.N)
        return np.stack([(j // self.n_x) * self.s, (j % self.n_x) * self.s], axis=1)

    def origin(self, j: int) -> tuple[int, int]:
        return (j // self.n_x) * self.s, (j % self.n_x) * self.s


@dataclass
class PatchGrid:
    geom: GridGeom
    patches: np.ndarray  # (N, C*k*k), float64

    @property
    def N(self) -> int:
        return self.geom.N


@dataclass
class CorrespondenceField:
    """Best source patch per target patch, its similarity, and the novelty
    flag set by :func:`bidirectional_classify`."""

    match: np.ndarray  # (N_T,) int
    score: np.ndarray  # (N_T,) float64
    novelty: np.ndarray  # (N_T,) bool
    tgt_geom: GridGeom
    src_geom: GridGeom

    @classmethod
    def identity(cls, geom: GridGeom) -> "CorrespondenceField":
        n = geom.N
        return cls(np.arange(n), np.ones(n), np.zeros(n, dtype=bool), geom, geom)

    def coordinate_tensor(self) -> np.ndarray:
        """(n_y, n_x, 2) source-patch origins (y, x) for every target patch."""
        src = self.src_geom.origins()[self.match]
        return src.reshape(self.tgt_geom.n_y, self.tgt_geom.n_x, 2).astype(np.float32)


def extract_patches(D, k: int, s: int = 1) -> PatchGrid:
    D = np.asarray(D, dtype=np.float64)
    if D.ndim != 3:
        raise ValueError(f"expected (C, H, W) feature map, got shape {D.shape}")
    C, H, W = D.shape
    if k < 1 or s < 1:
        raise ValueError("patch size and stride must be >= 1")
    if k > H or k > W:
        raise ValueError(f"patch size {k} larger than map {H}x{W}")
    geom = GridGeom(k, s, H, W)
    win = sliding_window_view(D, (k, k), axis=(1, 2))[:, ::s, ::s]  # (C, n_y, n_x, k, k)
    patches = win.transpose(1, 2, 0, 3, 4).reshape(geom.N, C * k * k)
    return PatchGrid(geom, np.ascontiguousarray(patches))


def similarity_matrix(src: PatchGrid, tgt: PatchGrid) -> np.ndarray:
    """(N_T, N_S) cosine similarities."""
    if src.patches.shape[1] != tgt.patches.shape[1]:
        raise ValueError("source and target patches differ in dimensionality")
    return cosine_matrix(tgt.patches, src.patches)


def match_patches(src: PatchGrid, tgt: PatchGrid, sims: np.ndarray | None = None) -> CorrespondenceField:
    if sims is None:
        sims = similarity_matrix(src, tgt)
    match = np.argmax(sims, axis=1)  # first maximum wins
    score = sims[np.arange(sims.shape[0]), match]
    return CorrespondenceField(match, score, np.zeros(tgt.N, dtype=bool), tgt.geom, src.geom)


def reassemble_aligned(src_values, field: CorrespondenceField) -> np.ndarray:
    """Copy each matched source patch of ``src_values`` into its target patch
    footprint and average overlapping contributions."""
    v = np.asarray(src_values, dtype=np.float64)
    tg, sg = field.tgt_geom, field.src_geom
    if v.ndim != 3 or v.shape[1:] != (sg.H, sg.W):
        raise ValueError(f"values of shape {v.shape} do not fit source geometry {sg.H}x{sg.W}")
    if tg.k != sg.k or len(field.match) != tg.N:
        raise ValueError("field geometry mismatch")
    k = tg.k
    t_org = tg.origins()
    s_org = sg.origins()[field.match]
    acc = np.zeros((v.shape[0], tg.H, tg.W))
    cnt = np.zeros((tg.H, tg.W))
    for dy in range(k):
        for dx in range(k):
            ty, tx = t_org[:, 0] + dy, t_org[:, 1] + dx
            sy, sx = s_org[:, 0] + dy, s_org[:, 1] + dx
            # np.add.at accumulates in index order, keeping sums reproducible
            np.add.at(acc, (slice(None), ty, tx), v[:, sy, sx])
            np.add.at(cnt, (ty, tx), 1.0)
    out = acc / (cnt + OVERLAP_EPS)
    if np.asarray(src_values).dtype == np.float64:
        return out
    return as_tensor(out)


def coverage(geom: GridGeom) -> np.ndarray:
    """W(u): number of patches covering each pixel."""
    cnt = np.zeros((geom.H, geom.W))
    for y, x in geom.origins():
        cnt[y:y + geom.k, x:x + geom.k] += 1
    return cnt


def align_correction(z, D_S, D_T, k: int, s: int = 1, return_field: bool = False):
    """Warp the correction ``z`` so it follows target geometry via patch
    matching of ``D_T`` against ``D_S``."""
    z = np.asarray(z)
    if np.shape(D_S) != np.shape(D_T):
        raise ValueError("source and target feature maps differ in shape")
    if z.shape[1:] != np.shape(D_S)[1:]:
        raise ValueError("correction and feature maps are not spatially congruent")
    src, tgt = extract_patches(D_S, k, s), extract_patches(D_T, k, s)
    field = match_patches(src, tgt)
    out = reassemble_aligned(z, field)
    return (out, field) if return_field else out


def topk_indices(scores: np.ndarray, k: int) -> np.ndarray:
    """Row-wise indices of the ``k`` largest entries, ties to smaller index."""
    k = min(k, scores.shape[1])
    order = np.argsort(-scores, axis=1, kind="stable")
    return order[:, :k]


def mutual_topk(sims: np.ndarray, k_nn: int) -> np.ndarray:
    """Boolean (N_T, N_S) matrix of bidirectionally matched pairs."""
    nt, ns = sims.shape
    in_kt = np.zeros((nt, ns), dtype=bool)  # s in K(t)
    np.put_along_axis(in_kt, topk_indices(sims, k_nn), True, axis=1)
    in_ks = np.zeros((ns, nt), dtype=bool)  # t in K(s)
    np.put_along_axis(in_ks, topk_indices(sims.T, k_nn), True, axis=1)
    return in_kt & in_ks.T


def lower_quantile(values: np.ndarray, gamma: float) -> float:
    ordered = np.sort(values, kind="stable")
    return float(ordered[int(np.floor(gamma * (len(ordered) - 1)))])


def bidirectional_classify(src: PatchGrid, tgt: PatchGrid, k_nn: int = 3, gamma: float = 0.03,
                           sims: np.ndarray | None = None) -> CorrespondenceField:
    """Flag target patches whose best source match is both not mutual within
    the top ``k_nn`` and among the weakest ``gamma`` share of unmatched ones."""
    if k_nn < 1:
        raise ValueError("k_nn must be >= 1")
    if not 0.0 <= gamma <= 1.0:
        raise ValueError("gamma must lie in [0, 1]")
    if sims is None:
        sims = similarity_matrix(src, tgt)
    field = match_patches(src, tgt, sims)
    matched = mutual_topk(sims, k_nn).any(axis=1)
    unmatched = ~matched
    if unmatched.any():
        sim_max = field.score
        tau = lower_quantile(sim_max[unmatched], gamma)
        field.novelty = unmatched & (sim_max < tau)
    return field


def pixel_novelty(field: CorrespondenceField) -> np.ndarray:
    """Majority vote of covering target patches per pixel; ties count as new."""
    g = field.tgt_geom
    votes = np.zeros((g.H, g.W))
    cnt = coverage(g)
    for (y, x), nov in zip(g.origins(), field.novelty):
        if nov:
            votes[y:y + g.k, x:x + g.k] += 1
    return (cnt > 0) & (2 * votes >= cnt)


def pixel_source_coords(field: CorrespondenceField) -> np.ndarray:
    """(2, H, W) overlap-averaged source (y, x) coordinate of every target
    pixel, obtained by reassembling the source coordinate grid."""
    sg = field.src_geom
    yy, xx = np.meshgrid(np.arange(sg.H, dtype=np.float64), np.arange(sg.W, dtype=np.float64), indexing="ij")
    return reassemble_aligned(np.stack([yy, xx]), field)


def token_field(field: CorrespondenceField, ratio: int, token_hw: int) -> np.ndarray:
    """Source token index for every target token (row-major token grid).

    Source pixel coordinates are averaged over each target token's
    ``ratio x ratio`` footprint and rounded to the nearest token centre.
    """
    coords = pixel_source_coords(field)
    n = token_hw
    block = coords[:, :n * ratio, :n * ratio].reshape(2, n, ratio, n, ratio).mean(axis=(2, 4))
    tok = np.floor((block - (ratio - 1) / 2.0) / ratio + 0.5).astype(np.int64)
    tok = np.clip(tok, 0, n - 1)
    return (tok[0] * n + tok[1]).ravel()


def token_novelty(field: CorrespondenceField, ratio: int, token_hw: int) -> np.ndarray:
    pix = pixel_novelty(field).astype(np.float64)
    n = token_hw
    share = pix[:n * ratio, :n * ratio].reshape(n, ratio, n, ratio).mean(axis=(1, 3))
    return (share >= 0.5).ravel()


def token_grid_field(tok_match: np.ndarray, token_hw: int) -> CorrespondenceField:
    """Express a per-token source index as a k=1 patch field on the token grid."""
    g = GridGeom(1, 1, token_hw, token_hw)
    n = g.N
    return CorrespondenceField(np.asarray(tok_match), np.ones(n), np.zeros(n, dtype=bool), g, g)


def field_image(field: CorrespondenceField, scale: int = 4) -> np.ndarray:
    """Colour-coded uint8 view of a field: red = source x, green = source y,
    blue = novelty."""
    g, sg = field.tgt_geom, field.src_geom
    coords = field.coordinate_tensor().astype(np.float64)
    img = np.zeros((g.n_y, g.n_x, 3))
    img[..., 0] = coords[..., 1] / max(sg.W - sg.k, 1)
    img[..., 1] = coords[..., 0] / max(sg.H - sg.k, 1)
    img[..., 2] = field.novelty.reshape(g.n_y, g.n_x)
    img = img.repeat(scale, axis=0).repeat(scale, axis=1)
    return np.round(np.clip(img, 0, 1) * 255).astype(np.uint8)
