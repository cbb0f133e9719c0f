import numpy as np
import pytest
import torch

from dpc import autodiff as ad
from dpc.geometry import Twist, exp_se3
from dpc.imaging import Intrinsics

K = Intrinsics(20.0, 22.0, 5.5, 4.5, 10, 12)


def r(*shape, seed=0, lo=-1.0, hi=1.0):
    g = torch.Generator().manual_seed(seed)
    return lo + (hi - lo) * torch.rand(tuple(shape), generator=g, dtype=torch.float64)


def weighted(fn, seed=99):
    """Scalarize a tensor-valued primitive with fixed random weights."""
    cache = {}

    def f(*xs):
        out = fn(*xs)
        outs = out if isinstance(out, tuple) else (out,)
        s = 0
        for j, o in enumerate(outs):
            if (j, o.shape) not in cache:
                cache[(j, o.shape)] = r(*o.shape, seed=seed + j)
            s = s + (o * cache[(j, o.shape)]).sum()
        return s

    return f


def check(fn, *inputs, tol=1e-6):
    rep = ad.gradcheck(weighted(fn), inputs, tol=tol, n_coords=24)
    assert rep.passed, str(rep)
    return rep


def test_linear_and_conv_primitives():
    check(ad.linear, r(3, 5), r(4, 5, seed=1), r(4, seed=2))
    check(lambda x, w, b: ad.conv2d(x, w, b, stride=2, padding=1), r(2, 3, 7, 8), r(4, 3, 3, 3, seed=1), r(4, seed=2))
    check(lambda x, w, b: ad.conv_transpose2d(x, w, b, stride=2, padding=1), r(2, 3, 4, 5), r(3, 2, 4, 4, seed=1),
          r(2, seed=2))


def test_batch_norm_primitive():
    x = r(4, 3, 5, 5)
    w, b = r(3, seed=1, lo=0.5, hi=1.5), r(3, seed=2)
    check(lambda x, w, b: ad.batch_norm(x, w, b, None, None, training=True), x, w, b)
    rm, rv = r(3, seed=3), r(3, seed=4, lo=0.5, hi=2.0)
    check(lambda x, w, b: ad.batch_norm(x, w, b, rm.clone(), rv.clone(), training=False), x, w, b)


def test_pointwise_primitives():
    # keep away from the relu/abs kinks
    x = r(4, 6) + torch.sign(r(4, 6, seed=5)) * 0.1
    check(ad.relu, x)
    check(ad.absolute, x)
    check(ad.sigmoid, r(4, 6, lo=-4, hi=4))
    check(ad.log, r(4, 6, lo=0.1, hi=3))
    check(ad.mean, r(3, 4))
    check(lambda x: ad.mean(x, dim=1), r(3, 4))
    check(ad.total, r(3, 4))
    check(lambda a, b: ad.concat([a, b], dim=1), r(2, 3), r(2, 5, seed=1))


def test_dropout_primitive():
    x = r(8, 16)

    def drop(x):
        return ad.dropout(x, 0.5, True, torch.Generator().manual_seed(3))

    check(drop, x)
    out = drop(x)
    kept = out != 0
    torch.testing.assert_close(out[kept], 2 * x[kept])
    assert torch.equal(ad.dropout(x, 0.5, False), x)


def test_bilinear_primitive():
    img = r(2, 3, 6, 7)
    u = r(2, 4, 5, seed=1, lo=0.2, hi=5.8)
    v = r(2, 4, 5, seed=2, lo=0.2, hi=4.8)
    # keep samples off cell edges, where the sampler has a kink
    u = u.floor() + 0.1 + 0.8 * (u - u.floor())
    v = v.floor() + 0.1 + 0.8 * (v - v.floor())
    check(lambda i, a, b: ad.bilinear_sample(i, a, b)[0], img, u, v)


def test_bilinear_out_of_frame_has_no_gradient():
    img = r(1, 1, 4, 4).requires_grad_(True)
    u = torch.tensor([[[-0.5, 1.5]]], dtype=torch.float64, requires_grad=True)
    v = torch.tensor([[[1.0, 1.0]]], dtype=torch.float64, requires_grad=True)
    out, valid = ad.bilinear_sample(img, u, v)
    assert valid.tolist() == [[[False, True]]]
    assert out[0, 0, 0, 0] == 0
    out.sum().backward()
    assert u.grad[0, 0, 0] == 0 and v.grad[0, 0, 0] == 0


def test_se3_exp_matches_geometry_and_gradchecks():
    for vec in ([0.1, -0.2, 0.3, 0.4, -0.5, 0.6], [1.0, 2.0, 3.0, 1e-4, 2e-4, -1e-4], [0.0] * 6):
        xi = torch.tensor([vec], dtype=torch.float64)
        rot, t = ad.se3_exp(xi)
        ref = exp_se3(Twist.from_vector(vec))
        np.testing.assert_allclose(rot[0].numpy(), ref.rotation, atol=1e-12)
        np.testing.assert_allclose(t[0].numpy(), ref.translation, atol=1e-12)
    check(ad.se3_exp, r(3, 6))
    # small-angle series branch
    check(ad.se3_exp, torch.cat([r(2, 3), r(2, 3, seed=1, lo=-1e-3, hi=1e-3)], dim=1))


def test_projection_primitives():
    depth = r(2, 10, 12, lo=1.0, hi=5.0)
    check(lambda d: ad.backproject(d, K), depth)
    p = ad.backproject(depth, K).detach()
    check(ad.transform_points, r(2, 3, 3), r(2, 3, seed=1), p)
    check(lambda q: torch.stack(ad.pinhole_project(q, K)[:2]), p)
    u, v, front = ad.pinhole_project(p, K)
    grid_v, grid_u = torch.meshgrid(torch.arange(10.0), torch.arange(12.0), indexing="ij")
    torch.testing.assert_close(u, grid_u.expand(2, -1, -1).double())
    torch.testing.assert_close(v, grid_v.expand(2, -1, -1).double())
    assert front.all()


def test_gradcheck_catches_a_wrong_gradient():
    class Bad(torch.autograd.Function):
        @staticmethod
        def forward(ctx, x):
            ctx.save_for_backward(x)
            return x**3

        @staticmethod
        def backward(ctx, g):
            (x,) = ctx.saved_tensors
            return g * 3.001 * x**2

    rep = ad.gradcheck(lambda x: Bad.apply(x).sum(), [r(5, lo=0.5, hi=1.5)])
    assert not rep.passed
    assert 1e-4 < rep.max_rel_error < 1e-2


def test_gradcheck_steps_past_kinks():
    # |x| summed over entries sitting within the base step of the kink
    x = torch.tensor([3e-5, -2e-5, 0.7], dtype=torch.float64)
    rep = ad.gradcheck(lambda x: (x.abs() * torch.tensor([1.0, 2.0, 3.0], dtype=x.dtype)).sum(), [x], n_coords=None)
    assert rep.passed and rep.n_unresolved == 0


def test_tape_records_and_is_single_use():
    x = r(2, 3).requires_grad_(True)
    with ad.Tape() as tape:
        loss = ad.mean(ad.sigmoid(ad.linear(x, r(4, 3, seed=1))))
    assert tape.names == ["linear", "sigmoid", "mean"]
    tape.backward(loss)
    assert x.grad is not None
    with pytest.raises(ad.TapeError):
        tape.backward(loss)
    with pytest.raises(ad.TapeError):
        ad.Tape().backward(loss)


def test_backward_needs_scalar_and_rejects_reuse():
    x = r(3).requires_grad_(True)
    with pytest.raises(ValueError):
        ad.backward(x * 2)
    loss = (x * 2).sum()
    ad.backward(loss)
    with pytest.raises(ad.TapeError):
        ad.backward(loss)


def test_non_finite_forward_raises():
    with pytest.raises(ad.NonFiniteError):
        ad.log(torch.zeros(3, dtype=torch.float64))


def test_shape_errors():
    with pytest.raises(ValueError):
        ad.linear(r(2, 3), r(4, 5))
    with pytest.raises(ValueError):
        ad.conv2d(r(1, 2, 5, 5), r(3, 4, 3, 3))
    with pytest.raises(ValueError):
        ad.se3_exp(r(2, 5))
