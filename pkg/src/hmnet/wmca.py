"""Window-based multi-head cross attention over 7x7 tiles with a relative
position bias, plus the tile partition/merge plumbing.

Grids whose extents are not multiples of 7 are zero-padded; padded key
positions are excluded with -inf logits and padded query outputs are
discarded when tiles are merged back, so results are exact for any grid
size. Self-attention is the x2 == x1 specialization.

The attention output is the merged, output-projected tile attention; the
residual fusion and the post-attention MLP around it belong to the memory
write operations (their parameters live here under ``mlp.*`` because they
are part of every write's parameter bundle).
"""

from __future__ import annotations

import numpy as np

from .errors import ShapeError
from .ops import MACS, affine_bwd, affine_fwd, layer_norm_bwd, layer_norm_fwd

TILE = 7
N_REL = (2 * TILE - 1) ** 2  # 169 entries per head


def _rel_index() -> np.ndarray:
    """(49, 49) lookup: entry (i, j) -> (d_row+6)*13 + (d_col+6) of positions
    i (query) and j (key) within a tile."""
    pos = np.stack(np.meshgrid(np.arange(TILE), np.arange(TILE), indexing="ij"),
                   axis=-1).reshape(-1, 2)
    delta = pos[:, None, :] - pos[None, :, :]
    return (delta[..., 0] + TILE - 1) * (2 * TILE - 1) + (delta[..., 1] + TILE - 1)


REL_INDEX = _rel_index()


class TileLayout:
    """Tiling of an (H, W) grid into 7x7 tiles with a validity mask."""

    __slots__ = ("rows", "cols", "padded_rows", "padded_cols", "tiles_r", "tiles_c", "mask")

    def __init__(self, rows: int, cols: int):
        self.rows, self.cols = rows, cols
        self.tiles_r = -(-rows // TILE)
        self.tiles_c = -(-cols // TILE)
        self.padded_rows = self.tiles_r * TILE
        self.padded_cols = self.tiles_c * TILE
        valid = np.zeros((self.padded_rows, self.padded_cols), dtype=bool)
        valid[:rows, :cols] = True
        self.mask = (valid.reshape(self.tiles_r, TILE, self.tiles_c, TILE)
                     .transpose(0, 2, 1, 3).reshape(-1, TILE * TILE))

    @property
    def n_tiles(self) -> int:
        return self.tiles_r * self.tiles_c


def tile_partition(x: np.ndarray, layout: TileLayout | None = None):
    """(H, W, D) -> (N, 49, D) tiles; padding cells are zero-valued and
    masked in the layout."""
    h, w, d = x.shape
    if layout is None:
        layout = TileLayout(h, w)
    xp = np.zeros((layout.padded_rows, layout.padded_cols, d), dtype=x.dtype)
    xp[:h, :w] = x
    tiles = (xp.reshape(layout.tiles_r, TILE, layout.tiles_c, TILE, d)
             .transpose(0, 2, 1, 3, 4).reshape(layout.n_tiles, TILE * TILE, d))
    return tiles, layout


def tile_merge(tiles: np.ndarray, layout: TileLayout) -> np.ndarray:
    """Exact inverse of :func:`tile_partition` (padding discarded)."""
    d = tiles.shape[-1]
    xp = (tiles.reshape(layout.tiles_r, layout.tiles_c, TILE, TILE, d)
          .transpose(0, 2, 1, 3, 4).reshape(layout.padded_rows, layout.padded_cols, d))
    return xp[:layout.rows, :layout.cols].copy()


def relative_position_bias(table: np.ndarray) -> np.ndarray:
    """table: (heads, 169) -> per-tile bias (heads, 49, 49)."""
    if table.shape[-1] != N_REL:
        raise ShapeError(f"bias table must have {N_REL} entries per head")
    return table[:, REL_INDEX]


def bias_table_grad(d_bias: np.ndarray) -> np.ndarray:
    """Scatter (heads, 49, 49) bias gradients back onto the 169-entry table."""
    heads = d_bias.shape[0]
    out = np.empty((heads, N_REL), dtype=d_bias.dtype)
    flat_idx = REL_INDEX.ravel()
    for h in range(heads):
        out[h] = np.bincount(flat_idx, weights=d_bias[h].ravel(), minlength=N_REL)
    return out


def init_wmca_params(store, prefix, d_q, d_kv, heads, rng, d_out=None,
                     scale=0.02, dtype=np.float64):
    """Parameters for one write operation's attention + post MLP bundle."""
    d_out = d_q if d_out is None else d_out
    if d_q % heads:
        raise ShapeError(f"attention dim {d_q} not divisible by {heads} heads")

    def w(shape):
        return (rng.normal(size=shape) * scale).astype(dtype)

    store.add(f"{prefix}.ln1.g", np.ones(d_q, dtype))
    store.add(f"{prefix}.ln1.b", np.zeros(d_q, dtype))
    store.add(f"{prefix}.ln2.g", np.ones(d_kv, dtype))
    store.add(f"{prefix}.ln2.b", np.zeros(d_kv, dtype))
    store.add(f"{prefix}.q.w", w((d_q, d_q)))
    store.add(f"{prefix}.q.b", np.zeros(d_q, dtype))
    store.add(f"{prefix}.k.w", w((d_kv, d_q)))
    store.add(f"{prefix}.k.b", np.zeros(d_q, dtype))
    store.add(f"{prefix}.v.w", w((d_kv, d_q)))
    store.add(f"{prefix}.v.b", np.zeros(d_q, dtype))
    store.add(f"{prefix}.bias.table", np.zeros((heads, N_REL), dtype))
    store.add(f"{prefix}.out.w", w((d_q, d_out)))
    store.add(f"{prefix}.out.b", np.zeros(d_out, dtype))
    store.add(f"{prefix}.mlp.ln_g", np.ones(d_out, dtype))
    store.add(f"{prefix}.mlp.ln_b", np.zeros(d_out, dtype))
    store.add(f"{prefix}.mlp.w1", w((d_out, d_out)))
    store.add(f"{prefix}.mlp.b1", np.zeros(d_out, dtype))
    store.add(f"{prefix}.mlp.w2", w((d_out, d_out)))
    store.add(f"{prefix}.mlp.b2", np.zeros(d_out, dtype))


def _masked_softmax(logits, key_mask):
    """Softmax over the last axis with invalid keys at -inf. Rows with no
    valid key (possible only for fully padded tiles) come back all-zero."""
    neg = np.where(key_mask[:, None, None, :], 0.0, -np.inf).astype(logits.dtype)
    shifted = logits + neg
    m = shifted.max(axis=-1, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    e = np.exp(shifted - m)
    s = e.sum(axis=-1, keepdims=True)
    return e / np.where(s == 0.0, 1.0, s)


def wmca_attend_fwd(x1, x2, p, heads):
    """Tiled cross attention: queries from x1, keys/values from x2 (same
    spatial dims). Returns (y, cache) with y: (H, W, d_out)."""
    if x1.shape[:2] != x2.shape[:2]:
        raise ShapeError(f"spatial dims differ: {x1.shape[:2]} vs {x2.shape[:2]}")
    d_inner = p["q.w"].shape[1]
    dh = d_inner // heads
    scale = 1.0 / np.sqrt(np.asarray(dh, dtype=x1.dtype))

    xh1, c_ln1 = layer_norm_fwd(x1, p["ln1.g"], p["ln1.b"])
    xh2, c_ln2 = layer_norm_fwd(x2, p["ln2.g"], p["ln2.b"])
    q, c_q = affine_fwd(xh1, p["q.w"], p["q.b"])
    k, c_k = affine_fwd(xh2, p["k.w"], p["k.b"])
    v, c_v = affine_fwd(xh2, p["v.w"], p["v.b"])

    qt, layout = tile_partition(q)
    kt, _ = tile_partition(k, layout)
    vt, _ = tile_partition(v, layout)
    n = layout.n_tiles
    qt = qt.reshape(n, TILE * TILE, heads, dh)
    kt = kt.reshape(n, TILE * TILE, heads, dh)
    vt = vt.reshape(n, TILE * TILE, heads, dh)

    bias = relative_position_bias(p["bias.table"])
    logits = np.einsum("nqhd,nkhd->nhqk", qt, kt) * scale + bias[None]
    att = _masked_softmax(logits, layout.mask)
    out_t = np.einsum("nhqk,nkhd->nqhd", att, vt)
    MACS.add(2 * n * (TILE * TILE) ** 2 * d_inner)

    merged = tile_merge(out_t.reshape(n, TILE * TILE, d_inner), layout)
    y, c_out = affine_fwd(merged, p["out.w"], p["out.b"])
    cache = (layout, heads, scale, c_ln1, c_ln2, c_q, c_k, c_v,
             (qt, kt, vt, att), c_out)
    return y, cache


def wmca_attend_bwd(cache, dy):
    """Returns (dx1, dx2, grads) with grads keyed by parameter suffix."""
    layout, heads, scale, c_ln1, c_ln2, c_q, c_k, c_v, (qt, kt, vt, att), c_out = cache
    n = layout.n_tiles
    dh = qt.shape[-1]
    d_inner = heads * dh
    grads: dict[str, np.ndarray] = {}

    d_merged, grads["out.w"], grads["out.b"] = affine_bwd(c_out, dy)
    d_out_t, _ = tile_partition(d_merged, layout)
    d_out_t = d_out_t.reshape(n, TILE * TILE, heads, dh)

    d_att = np.einsum("nqhd,nkhd->nhqk", d_out_t, vt)
    d_vt = np.einsum("nhqk,nqhd->nkhd", att, d_out_t)
    s = (att * d_att).sum(axis=-1, keepdims=True)
    d_logits = att * (d_att - s)
    grads["bias.table"] = bias_table_grad(d_logits.sum(axis=0))
    d_qt = np.einsum("nhqk,nkhd->nqhd", d_logits, kt) * scale
    d_kt = np.einsum("nhqk,nqhd->nkhd", d_logits, qt) * scale

    d_q = tile_merge(d_qt.reshape(n, TILE * TILE, d_inner), layout)
    d_k = tile_merge(d_kt.reshape(n, TILE * TILE, d_inner), layout)
    d_v = tile_merge(d_vt.reshape(n, TILE * TILE, d_inner), layout)

    dxh1, grads["q.w"], grads["q.b"] = affine_bwd(c_q, d_q)
    dxh2_k, grads["k.w"], grads["k.b"] = affine_bwd(c_k, d_k)
    dxh2_v, grads["v.w"], grads["v.b"] = affine_bwd(c_v, d_v)
    dx1, grads["ln1.g"], grads["ln1.b"] = layer_norm_bwd(c_ln1, dxh1)
    dx2, grads["ln2.g"], grads["ln2.b"] = layer_norm_bwd(c_ln2, dxh2_k + dxh2_v)
    return dx1, dx2, grads
