import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from thzlab import fusion as F
from thzlab import tensor as T
from thzlab.gradcheck import grad_check
from thzlab.nn import ParamStore
from thzlab.tensor import ShapeError, SingularBasisError, Tensor


def proj(v, **kw):
    return F.orth_project(Tensor(v), **kw).data


def test_basis_shape_and_determinism(rng):
    xa, xp = rng.uniform(size=(2, 3, 16, 16))
    v1 = F.build_basis(Tensor(xa), Tensor(xp), ParamStore(3), "s", k=8)
    v2 = F.build_basis(Tensor(xa), Tensor(xp), ParamStore(3), "s", k=8)
    assert v1.shape == (256, 8)
    assert np.array_equal(v1.data, v2.data)


def test_zero_inputs_give_zero_basis_and_singular_error():
    z = Tensor(np.zeros((3, 8, 8)))
    v = F.build_basis(z, z, ParamStore(0), "s", k=4)
    assert not v.data.any()
    with pytest.raises(SingularBasisError):
        F.orth_project(v)


def test_basis_spatial_mismatch():
    with pytest.raises(ShapeError):
        F.build_basis(Tensor(np.ones((3, 8, 8))), Tensor(np.ones((3, 8, 4))), ParamStore(0), "s")


def test_projector_onto_ones():
    np.testing.assert_allclose(proj(np.ones((2, 1))), np.full((2, 2), 0.5), atol=1e-12)


def test_orthonormal_columns(rng):
    q, _ = np.linalg.qr(rng.standard_normal((20, 5)))
    p = proj(q)
    np.testing.assert_allclose(p, q @ q.T, atol=1e-12)
    np.testing.assert_allclose(p @ q, q, atol=1e-12)


def test_matches_qr_oracle(rng):
    for _ in range(10):
        v = rng.standard_normal((64, 8))
        q, _ = np.linalg.qr(v)
        ref = q @ q.T
        assert np.linalg.norm(proj(v) - ref) / np.linalg.norm(ref) <= 1e-8


@given(st.integers(0, 2 ** 31), st.integers(1, 8))
def test_projector_invariants(seed, k):
    v = np.random.default_rng(seed).standard_normal((32, k))
    p = proj(v)
    assert np.linalg.norm(p @ p - p) / np.linalg.norm(p) <= 1e-5
    assert np.abs(p - p.T).max() <= 1e-6
    assert np.abs(p @ v - v).max() <= 1e-6
    assert abs(np.trace(p) - k) <= 1e-3


def test_rank_deficient_basis_stays_bounded(rng):
    v = rng.standard_normal((64, 3)) @ rng.standard_normal((3, 8))
    p = proj(v)
    assert np.all(np.isfinite(p))
    assert abs(np.trace(p) - 3) <= 1e-3
    assert np.abs(p @ v - v).max() <= 1e-6


def test_plain_ridge_is_refine_zero(rng):
    v = rng.standard_normal((16, 4))
    g = v.T @ v
    eps = 1e-6 * np.trace(g) / 4
    np.testing.assert_allclose(proj(v, refine=0), v @ np.linalg.solve(g + eps * np.eye(4), v.T), atol=1e-12)


def test_uniform_attention_for_identical_rows(rng):
    v = np.tile(rng.standard_normal(4), (9, 1))
    np.testing.assert_allclose(F.attention_weights(Tensor(v)).data, np.full((9, 9), 1 / 9), atol=1e-15)


def test_attention_naive_oracle(rng):
    for _ in range(10):
        v = rng.standard_normal((3, 2))
        s = v @ v.T
        ref = np.exp(s) / np.exp(s).sum(axis=1, keepdims=True)
        np.testing.assert_allclose(F.attention_weights(Tensor(v)).data, ref, atol=1e-12)


@given(st.integers(0, 2 ** 31), st.floats(0.1, 30.0))
def test_attention_rows_normalized(seed, scale):
    v = scale * np.random.default_rng(seed).standard_normal((25, 4))
    b = F.attention_weights(Tensor(v)).data
    assert np.abs(b.sum(axis=1) - 1).max() <= 1e-6
    assert b.min() >= 0 and b.max() <= 1


def test_softmax_shift_invariance(rng):
    x = rng.standard_normal((5, 6))
    c = rng.standard_normal((5, 1)) * 100
    np.testing.assert_allclose(T.softmax(Tensor(x + c)).data, T.softmax(Tensor(x)).data, atol=1e-15)


def fs_identity():
    return Tensor(np.eye(6).reshape(6, 6, 1, 1))


def test_identity_attention_and_projection(rng):
    xa, xp = rng.standard_normal((2, 3, 4, 4))
    eye = Tensor(np.eye(16))
    out = F.safm_apply(Tensor(xa), Tensor(xp), eye, eye, Tensor(np.zeros((6, 4, 4))), fs_identity())
    np.testing.assert_array_equal(out.data, np.concatenate([xa, xp]))


def test_zero_spectral_inputs_give_residual(rng):
    z = Tensor(np.zeros((3, 4, 4)))
    beta = Tensor(rng.dirichlet(np.ones(16), size=16))
    xf = rng.standard_normal((5, 4, 4))
    w = Tensor(rng.standard_normal((5, 6, 1, 1)))
    out = F.safm_apply(z, z, beta, Tensor(rng.standard_normal((16, 16))), Tensor(xf), w)
    assert np.array_equal(out.data, xf)


def test_safm_apply_loop_oracle(rng):
    for _ in range(10):
        xa, xp = rng.standard_normal((2, 3, 4, 4))
        beta = rng.dirichlet(np.ones(16), size=16)
        p = rng.standard_normal((16, 16))
        w = rng.standard_normal((2, 6, 1, 1))
        b = rng.standard_normal(2)
        xf = rng.standard_normal((2, 4, 4))
        x = np.concatenate([xa, xp]).reshape(6, 16).T      # N x 6
        s = np.zeros((16, 6))
        for i in range(16):
            for c in range(6):
                s[i, c] = sum(p[i, m] * x[m, c] for m in range(16))
        o = np.zeros((16, 6))
        for j in range(16):
            for i in range(16):
                o[j] += beta[j, i] * s[i]
        ref = np.einsum("oc,nc->on", w[:, :, 0, 0], o).reshape(2, 4, 4) + b[:, None, None] + xf
        out = F.safm_apply(Tensor(xa), Tensor(xp), Tensor(beta), Tensor(p), Tensor(xf), Tensor(w), Tensor(b))
        np.testing.assert_allclose(out.data, ref, atol=1e-12)


def test_safm_channel_mismatch(rng):
    x = Tensor(rng.standard_normal((3, 4, 4)))
    with pytest.raises(ShapeError):
        F.safm_apply(x, x, Tensor(np.eye(16)), Tensor(np.eye(16)), Tensor(np.zeros((4, 4, 4))), fs_identity())


def test_safm_composite_gradcheck(rng):
    xa, xp = rng.uniform(size=(2, 1, 3, 8, 8))
    xf = rng.standard_normal((1, 4, 8, 8))
    store = ParamStore(1)
    F.safm(Tensor(xa), Tensor(xp), Tensor(xf), store, "m", k=4, c1=4)
    store.frozen = True
    params = store.trainable()

    def fn(*ps):
        return F.safm(Tensor(xa), Tensor(xp), ps[-1], store, "m", k=4, c1=4)
    rep = grad_check(fn, params + [Tensor(xf, requires_grad=True)], rel_tol=1e-4, seed=2)
    assert rep.passed, rep.to_dict()


def test_cam_pool_examples(rng):
    assert F.cam_pool(Tensor(np.full((1, 3, 3), 2.5))).data.ravel()[0] == 2.5
    assert F.cam_pool(Tensor(np.array([[[1.0, 3.0]]]))).data.ravel()[0] == 2.0
    for _ in range(10):
        x = rng.standard_normal((4, 5, 6))
        ref = np.array([sum(x[c, i, j] for i in range(5) for j in range(6)) / 30 for c in range(4)])
        np.testing.assert_allclose(F.cam_pool(Tensor(x)).data.ravel(), ref, atol=1e-14)


def forced_cam(c, bias):
    store = ParamStore(0)
    x = Tensor(np.zeros((1, c, 2, 2)))
    F.cam_apply(x, x, store, "cam")
    store.params["cam.excite.w"].data[...] = 0.0
    store.params["cam.excite.b"].data[...] = bias
    return store


def test_cam_extremes(rng):
    xc, xs = rng.standard_normal((2, 1, 4, 3, 3))
    store = forced_cam(4, np.r_[np.full(4, 1000.0), np.full(4, -1000.0)])
    assert np.array_equal(F.cam_apply(Tensor(xc), Tensor(xs), store, "cam").data, xc)
    store = forced_cam(4, 0.0)
    np.testing.assert_allclose(F.cam_apply(Tensor(xc), Tensor(xs), store, "cam").data, (xc + xs) / 2, atol=1e-15)


@given(st.integers(0, 2 ** 31))
def test_cam_output_bounded(seed):
    r = np.random.default_rng(seed)
    xc, xs = r.standard_normal((2, 2, 4, 3, 3))
    store = ParamStore(seed % 1000)
    w = F.cam_weights(Tensor(xc), Tensor(xs), store, "cam")
    out = F.cam_apply(Tensor(xc), Tensor(xs), store, "cam").data
    assert w.shape == (2, 8, 1, 1) and np.all((w.data > 0) & (w.data < 1))
    assert out.shape == xc.shape
    assert np.all(np.abs(out) <= np.abs(xc) + np.abs(xs) + 1e-12)


def test_cam_errors():
    store = ParamStore(0)
    with pytest.raises(ValueError):
        F.cam_apply(Tensor(np.ones((1, 3, 2, 2))), Tensor(np.ones((1, 3, 2, 2))), store, "a")
    with pytest.raises(ShapeError):
        F.cam_apply(Tensor(np.ones((1, 4, 2, 2))), Tensor(np.ones((1, 4, 3, 2))), store, "b")


def test_safm_degenerate_item_falls_back_to_residual(rng):
    xa = rng.uniform(size=(2, 3, 4, 4))
    xa[1] = 0.0
    xf = rng.standard_normal((2, 4, 4, 4))
    store = ParamStore(0)
    out = F.safm(Tensor(xa), Tensor(xa.copy()), Tensor(xf), store, "m", k=4, c1=4, training=False)
    bias = store.params["m.fs.b"].data[:, None, None]
    np.testing.assert_allclose(out.data[1], xf[1] + bias, atol=1e-15)
    assert np.all(np.isfinite(out.data))
