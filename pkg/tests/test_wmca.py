import numpy as np
import pytest
from oracles import dense_cross_attention_tile

from hmnet import wmca
from hmnet.gradcheck import compare_store_gradients
from hmnet.params import ParameterStore

HEADS = 2


def make_params(seed=0, d=8, d_out=None, prefix="w"):
    store = ParameterStore()
    rng = np.random.default_rng(seed)
    wmca.init_wmca_params(store, prefix, d, d, HEADS, rng, d_out=d_out, scale=0.3)
    return store


# ---------------------------------------------------------------------------
# tiles


def test_7x7_grid_single_tile_no_padding():
    x = np.arange(7 * 7 * 3, dtype=float).reshape(7, 7, 3)
    tiles, layout = wmca.tile_partition(x)
    assert tiles.shape == (1, 49, 3)
    assert layout.mask.all()


def test_8x8_grid_padding_arithmetic():
    x = np.ones((8, 8, 2))
    tiles, layout = wmca.tile_partition(x)
    assert layout.n_tiles == 4
    assert (layout.padded_rows, layout.padded_cols) == (14, 14)
    assert (~layout.mask).sum() == 4 * 49 - 64  # 132 masked cells
    assert tiles.reshape(-1, 2)[~layout.mask.ravel()].sum() == 0  # padding is zero


@pytest.mark.parametrize("h,w", [(7, 7), (8, 8), (5, 11), (14, 3), (1, 1)])
def test_partition_merge_round_trip(h, w):
    rng = np.random.default_rng(h * 100 + w)
    x = rng.normal(size=(h, w, 5))
    tiles, layout = wmca.tile_partition(x)
    assert np.array_equal(wmca.tile_merge(tiles, layout), x)


# ---------------------------------------------------------------------------
# relative position bias


def test_zero_table_zero_bias():
    bias = wmca.relative_position_bias(np.zeros((HEADS, 169)))
    assert not bias.any()


def test_diagonal_shares_center_entry():
    rng = np.random.default_rng(1)
    table = rng.normal(size=(1, 169))
    bias = wmca.relative_position_bias(table)
    center = table[0, 6 * 13 + 6]
    assert np.all(bias[0].diagonal() == center)


def test_bias_matches_double_loop_oracle():
    rng = np.random.default_rng(2)
    table = rng.normal(size=(HEADS, 169))
    bias = wmca.relative_position_bias(table)
    for i in range(49):
        ri, ci = divmod(i, 7)
        for j in range(49):
            rj, cj = divmod(j, 7)
            for h in range(HEADS):
                assert bias[h, i, j] == table[h, (ri - rj + 6) * 13 + (ci - cj + 6)]


# ---------------------------------------------------------------------------
# attention semantics


def test_zero_value_map_gives_zero_output():
    store = make_params(3)
    p = store.subset("w")
    p["v.w"][:] = 0.0
    p["v.b"][:] = 0.0
    p["out.b"][:] = 0.0
    rng = np.random.default_rng(3)
    y, _ = wmca.wmca_attend_fwd(rng.normal(size=(9, 9, 8)), rng.normal(size=(9, 9, 8)),
                                p, HEADS)
    assert np.abs(y).max() == 0.0


def test_uniform_keys_average_valid_values():
    store = make_params(4)
    p = store.subset("w")
    p["k.w"][:] = 0.0
    p["k.b"][:] = 0.0          # all logits 0 -> uniform over valid keys
    p["bias.table"][:] = 0.0
    p["out.w"][:] = np.eye(8)
    p["out.b"][:] = 0.0
    rng = np.random.default_rng(4)
    x1 = rng.normal(size=(8, 8, 8))
    x2 = rng.normal(size=(8, 8, 8))
    y, cache = wmca.wmca_attend_fwd(x1, x2, p, HEADS)
    # reproduce v on the valid grid and average per tile
    from hmnet.ops import affine_fwd, layer_norm_fwd
    xh2, _ = layer_norm_fwd(x2, p["ln2.g"], p["ln2.b"])
    v, _ = affine_fwd(xh2, p["v.w"], p["v.b"])
    for (r0, c0) in [(0, 0), (0, 7), (7, 0), (7, 7)]:
        block = v[r0:min(r0 + 7, 8), c0:min(c0 + 7, 8)]
        mean = block.reshape(-1, 8).mean(axis=0)
        got = y[r0:min(r0 + 7, 8), c0:min(c0 + 7, 8)].reshape(-1, 8)
        assert np.abs(got - mean).max() < 1e-12


def test_single_tile_matches_dense_oracle():
    store = make_params(5)
    p = store.subset("w")
    rng = np.random.default_rng(5)
    p["bias.table"][:] = rng.normal(size=(HEADS, 169)) * 0.2
    x1 = rng.normal(size=(7, 7, 8))
    x2 = rng.normal(size=(7, 7, 8))
    y, _ = wmca.wmca_attend_fwd(x1, x2, p, HEADS)
    ref = dense_cross_attention_tile(x1, x2, p, HEADS)
    assert np.abs(y - ref).max() < 1e-9


def test_self_attention_specialization_is_exact():
    store = make_params(6)
    p = store.subset("w")
    # shared params: make both input norms identical
    p["ln2.g"][:] = p["ln1.g"]
    p["ln2.b"][:] = p["ln1.b"]
    rng = np.random.default_rng(6)
    x = rng.normal(size=(9, 5, 8))
    y_cross, _ = wmca.wmca_attend_fwd(x, x.copy(), p, HEADS)
    y_self, _ = wmca.wmca_attend_fwd(x, x, p, HEADS)
    assert np.array_equal(y_cross, y_self)


def test_tile_locality_is_bit_exact():
    store = make_params(7)
    p = store.subset("w")
    rng = np.random.default_rng(7)
    x1 = rng.normal(size=(10, 10, 8))
    x2 = rng.normal(size=(10, 10, 8))
    base, _ = wmca.wmca_attend_fwd(x1, x2, p, HEADS)
    x2b = x2.copy()
    x2b[2, 3] += 1.0  # inside tile (0, 0)
    pert, _ = wmca.wmca_attend_fwd(x1, x2b, p, HEADS)
    assert np.array_equal(base[7:, 7:], pert[7:, 7:])   # tile (1,1) untouched
    assert np.array_equal(base[:7, 7:], pert[:7, 7:])   # tile (0,1) untouched
    assert np.array_equal(base[7:, :7], pert[7:, :7])   # tile (1,0) untouched
    assert not np.array_equal(base[:7, :7], pert[:7, :7])


def test_softmax_rows_sum_to_one_over_valid_keys():
    store = make_params(8)
    rng = np.random.default_rng(8)
    x1 = rng.normal(size=(9, 8, 8))
    x2 = rng.normal(size=(9, 8, 8))
    _, cache = wmca.wmca_attend_fwd(x1, x2, store.subset("w"), HEADS)
    layout, att = cache[0], cache[8][3]
    sums = att.sum(axis=-1)
    assert np.abs(sums - 1.0).max() < 1e-12
    # masked key positions received no mass
    for n in range(layout.n_tiles):
        dead = ~layout.mask[n]
        if dead.any():
            assert np.abs(att[n][:, :, dead]).max() == 0.0


def test_projection_to_different_output_width():
    store = make_params(9, d=8, d_out=4)
    rng = np.random.default_rng(9)
    y, _ = wmca.wmca_attend_fwd(rng.normal(size=(7, 7, 8)), rng.normal(size=(7, 7, 8)),
                                store.subset("w"), HEADS)
    assert y.shape == (7, 7, 4)


# ---------------------------------------------------------------------------
# gradients


def test_wmca_gradcheck():
    store = make_params(10)
    rng = np.random.default_rng(10)
    p = store.subset("w")
    p["bias.table"][:] = rng.normal(size=(HEADS, 169)) * 0.1
    x1 = rng.normal(size=(7, 7, 8))
    x2 = rng.normal(size=(7, 7, 8))
    store.add("x1", x1)
    store.add("x2", x2)
    proj = rng.normal(size=(7, 7, 8)) / x1.size

    def loss():
        y, _ = wmca.wmca_attend_fwd(store["x1"], store["x2"], store.subset("w"), HEADS)
        return float((y * proj).sum())

    def analytic():
        _, cache = wmca.wmca_attend_fwd(store["x1"], store["x2"], store.subset("w"), HEADS)
        dx1, dx2, grads = wmca.wmca_attend_bwd(cache, proj)
        store.accumulate_prefixed("w", grads)
        store.accumulate("x1", dx1)
        store.accumulate("x2", dx2)

    names = [n for n in store.names() if n != "w.mlp.ln_g" and not n.startswith("w.mlp")]
    report = compare_store_gradients("wmca_attend", loss, analytic, store, names,
                                     tolerance=1e-4, seed=10, max_coords=120)
    assert report.passed, [f"{c.name}: {c.max_rel_err:.2e}" for c in report.checks if not c.passed]


def test_wmca_gradcheck_padded_grid():
    store = make_params(11)
    rng = np.random.default_rng(11)
    x1 = rng.normal(size=(8, 5, 8))
    x2 = rng.normal(size=(8, 5, 8))
    store.add("x1", x1)
    store.add("x2", x2)
    proj = rng.normal(size=(8, 5, 8)) / x1.size

    def loss():
        y, _ = wmca.wmca_attend_fwd(store["x1"], store["x2"], store.subset("w"), HEADS)
        return float((y * proj).sum())

    def analytic():
        _, cache = wmca.wmca_attend_fwd(store["x1"], store["x2"], store.subset("w"), HEADS)
        dx1, dx2, grads = wmca.wmca_attend_bwd(cache, proj)
        store.accumulate_prefixed("w", grads)
        store.accumulate("x1", dx1)
        store.accumulate("x2", dx2)

    report = compare_store_gradients("wmca_attend_padded", loss, analytic, store,
                                     ["x1", "x2", "w.q.w", "w.bias.table", "w.ln2.g"],
                                     tolerance=1e-4, seed=11, max_coords=100)
    assert report.passed
