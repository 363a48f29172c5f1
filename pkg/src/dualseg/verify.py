"""Release-gate property suite: gradient checks against finite differences,
nested-loop oracle comparisons, and algebraic invariants, all in double
precision. Each property is small, named, and independently runnable;
the CLI's verify command executes them all and reports pass/fail lines.

Ops are invoked through their modules (``N.conv2d``, not a direct import)
so a deliberately broken op injected by a test shows up as the named
property failing.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import attention as A
from . import data as D
from . import model as M
from . import nn as N
from . import tensor as T
from . import train as R

GRAD_TOL = 1e-4
ORACLE_TOL = 1e-6
ROW_TOL = 1e-5


@dataclass
class PropertyResult:
    name: str
    passed: bool
    detail: str


def _p(name):
    def wrap(fn):
        fn.property_name = name
        PROPERTIES.append(fn)
        return fn
    return wrap


PROPERTIES: list = []


def _rand(rng, *shape, requires_grad=True):
    return T.Tensor(rng.normal(size=shape), requires_grad=requires_grad)


def _check_grads(f, tensors, rng_detail=""):
    """Backprop f() and compare every tensor's grad to central differences."""
    loss = f()
    for t in tensors:
        t.zero_grad()
    loss.backward()
    worst = 0.0
    for t in tensors:
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        numeric = T.finite_diff_grad(lambda _t: f(), t)
        worst = max(worst, T.grad_error(analytic, numeric))
    return worst


# -- gradient properties ---------------------------------------------------------


@_p("grad:matmul")
def grad_matmul(rng, trials):
    worst = 0.0
    for _ in range(trials):
        a, b, c = (int(rng.integers(1, 5)) for _ in range(3))
        x = _rand(rng, a, b)
        y = _rand(rng, b, c)
        p = _rand(rng, 2, a, b)
        q = _rand(rng, 2, b, c)
        worst = max(worst, _check_grads(
            lambda: T.reduce_sum(T.matmul(T.transpose2d(T.matmul(x, y)), x)), [x, y]))
        worst = max(worst, _check_grads(
            lambda: T.reduce_sum(T.matmul(p, q)), [p, q]))
    return worst <= GRAD_TOL, f"max rel err {worst:.2e}"


@_p("grad:conv2d")
def grad_conv2d(rng, trials):
    worst = 0.0
    for _ in range(trials):
        cin = int(rng.integers(1, 4))
        cout = int(rng.integers(1, 4))
        kk = int(rng.integers(1, 4))
        stride = int(rng.integers(1, 3))
        pad = int(rng.integers(0, 3))
        dil = int(rng.integers(1, 3))
        hin = int(rng.integers(dil * (kk - 1) + 1, dil * (kk - 1) + 5))
        x = _rand(rng, 2, cin, hin, hin)
        w = _rand(rng, cout, cin, kk, kk)
        b = _rand(rng, cout)
        worst = max(worst, _check_grads(
            lambda: T.reduce_sum(N.conv2d(x, w, b, stride=stride, padding=pad,
                                          dilation=dil)), [x, w, b]))
    return worst <= GRAD_TOL, f"max rel err {worst:.2e}"


@_p("grad:batch_norm")
def grad_batch_norm(rng, trials):
    worst = 0.0
    for _ in range(trials):
        c = int(rng.integers(1, 5))
        h = int(rng.integers(1, 4))
        x = _rand(rng, 2, c, h, h)
        gamma = _rand(rng, c)
        beta = _rand(rng, c)
        rm = np.zeros(c)
        rv = np.ones(c)

        def f():
            return T.reduce_sum(N.batch_norm(x, gamma, beta, rm.copy(), rv.copy(),
                                             training=True))
        worst = max(worst, _check_grads(f, [x, gamma, beta]))
    return worst <= GRAD_TOL, f"max rel err {worst:.2e}"


@_p("grad:upsample")
def grad_upsample(rng, trials):
    worst = 0.0
    for _ in range(trials):
        h = int(rng.integers(1, 5))
        w = int(rng.integers(1, 5))
        x = _rand(rng, 1, 2, h, w)
        oh, ow = h * int(rng.integers(2, 5)), w * int(rng.integers(2, 5))
        worst = max(worst, _check_grads(
            lambda: T.reduce_sum(N.upsample_bilinear(x, oh, ow)), [x]))
    return worst <= GRAD_TOL, f"max rel err {worst:.2e}"


@_p("grad:cross_entropy")
def grad_cross_entropy(rng, trials):
    worst = 0.0
    for _ in range(trials):
        k = int(rng.integers(2, 6))
        h = int(rng.integers(1, 5))
        logits = _rand(rng, 2, k, h, h)
        labels = rng.integers(0, k, size=(2, h, h)).astype(np.int64)
        labels[rng.random(labels.shape) < 0.2] = N.IGNORE_INDEX
        worst = max(worst, _check_grads(
            lambda: N.cross_entropy(logits, labels), [logits]))
    return worst <= GRAD_TOL, f"max rel err {worst:.2e}"


@_p("grad:softmax")
def grad_softmax(rng, trials):
    worst = 0.0
    for _ in range(trials):
        r = int(rng.integers(1, 6))
        c = int(rng.integers(1, 6))
        x = _rand(rng, r, c)
        y = _rand(rng, r, c, requires_grad=False)
        worst = max(worst, _check_grads(
            lambda: T.reduce_sum(T.softmax_rows(x) * y), [x]))
    return worst <= GRAD_TOL, f"max rel err {worst:.2e}"


@_p("grad:pam")
def grad_pam(rng, trials):
    worst = 0.0
    for i in range(trials):
        c = int(rng.integers(2, 6))
        h = int(rng.integers(1, 4))
        pam = A.PositionAttention(c, reduction=2, rng=rng, dtype=np.float64)
        pam.alpha.data[:] = rng.normal()
        x = _rand(rng, 1, c, h, h)
        params = [x, pam.alpha, pam.conv_b.weight, pam.conv_c.weight, pam.conv_d.weight]

        def f():
            return T.reduce_sum(pam(x)[0])
        worst = max(worst, _check_grads(f, params))
    return worst <= GRAD_TOL, f"max rel err {worst:.2e}"


@_p("grad:cam")
def grad_cam(rng, trials):
    worst = 0.0
    for _ in range(trials):
        c = int(rng.integers(1, 6))
        h = int(rng.integers(1, 4))
        cam = A.ChannelAttention(dtype=np.float64)
        cam.beta.data[:] = rng.normal()
        x = _rand(rng, 1, c, h, h)

        def f():
            return T.reduce_sum(cam(x)[0])
        worst = max(worst, _check_grads(f, [x, cam.beta]))
    return worst <= GRAD_TOL, f"max rel err {worst:.2e}"


@_p("grad:fusion")
def grad_fusion(rng, trials):
    worst = 0.0
    for _ in range(trials):
        c = int(rng.integers(1, 4))
        h = int(rng.integers(1, 4))
        conv_p = N.Conv2d(c, c, 3, padding=1, rng=rng, dtype=np.float64)
        conv_c = N.Conv2d(c, c, 3, padding=1, rng=rng, dtype=np.float64)
        conv_o = N.Conv2d(c, 2, 1, rng=rng, dtype=np.float64)
        params = [conv_p.weight, conv_c.weight, conv_o.weight]
        ep = _rand(rng, 1, c, h, h)
        ec = _rand(rng, 1, c, h, h)

        def f():
            fused = A.fuse(ep, ec, A.FusionParams(conv_p, conv_c, conv_o))
            return T.reduce_sum(fused)
        worst = max(worst, _check_grads(f, [ep, ec] + params))
    return worst <= GRAD_TOL, f"max rel err {worst:.2e}"


# -- oracle properties -----------------------------------------------------------


def conv2d_oracle(x, w, b, stride=1, padding=0, dilation=1):
    """Scalar-loop cross-correlation; the reference conv2d is checked against."""
    n, cin, h, wdt = x.shape
    cout, _, kh, kw = w.shape
    oh = N.conv_out_extent(h, kh, stride, padding, dilation)
    ow = N.conv_out_extent(wdt, kw, stride, padding, dilation)
    xp = np.zeros((n, cin, h + 2 * padding, wdt + 2 * padding), dtype=x.dtype)
    xp[:, :, padding:padding + h, padding:padding + wdt] = x
    out = np.zeros((n, cout, oh, ow), dtype=x.dtype)
    for ni in range(n):
        for co in range(cout):
            for i in range(oh):
                for j in range(ow):
                    acc = 0.0
                    for ci in range(cin):
                        for u in range(kh):
                            for v in range(kw):
                                acc += (xp[ni, ci, i * stride + u * dilation,
                                           j * stride + v * dilation]
                                        * w[co, ci, u, v])
                    out[ni, co, i, j] = acc + (b[co] if b is not None else 0.0)
    return out


def pam_oracle(x, wb, bb, wc, bc, wd, bd, alpha):
    """Per-position scalar-loop position attention for one [c,h,w] input."""
    c, h, w = x.shape
    npos = h * w
    flat = x.reshape(c, npos)
    cr = wb.shape[0]
    key = np.empty((cr, npos))
    query = np.empty((cr, npos))
    value = np.empty((c, npos))
    for p in range(npos):
        for r in range(cr):
            key[r, p] = sum(wb[r, ci, 0, 0] * flat[ci, p] for ci in range(c)) + bb[r]
            query[r, p] = sum(wc[r, ci, 0, 0] * flat[ci, p] for ci in range(c)) + bc[r]
        for co in range(c):
            value[co, p] = sum(wd[co, ci, 0, 0] * flat[ci, p] for ci in range(c)) + bd[co]
    s = np.empty((npos, npos))
    for j in range(npos):
        energies = np.array([np.dot(key[:, i], query[:, j]) for i in range(npos)])
        e = np.exp(energies - energies.max())
        s[j] = e / e.sum()
    out = np.empty_like(flat)
    for j in range(npos):
        mix = sum(s[j, i] * value[:, i] for i in range(npos))
        out[:, j] = alpha * mix + flat[:, j]
    return out.reshape(c, h, w), s


def cam_oracle(x, beta):
    """Scalar-loop channel attention for one [c,h,w] input."""
    c, h, w = x.shape
    flat = x.reshape(c, h * w)
    xmat = np.empty((c, c))
    for j in range(c):
        energies = np.array([np.dot(flat[j], flat[i]) for i in range(c)])
        e = np.exp(energies - energies.max())
        xmat[j] = e / e.sum()
    out = np.empty_like(flat)
    for j in range(c):
        mix = sum(xmat[j, i] * flat[i] for i in range(c))
        out[j] = beta * mix + flat[j]
    return out.reshape(c, h, w), xmat


@_p("oracle:conv2d")
def oracle_conv2d(rng, trials):
    worst = 0.0
    for _ in range(trials):
        cin, cout = int(rng.integers(1, 4)), int(rng.integers(1, 4))
        kk = int(rng.integers(1, 4))
        stride, pad, dil = (int(rng.integers(1, 3)), int(rng.integers(0, 3)),
                            int(rng.integers(1, 3)))
        hin = int(rng.integers(dil * (kk - 1) + 1, dil * (kk - 1) + 5))
        x = rng.normal(size=(2, cin, hin, hin))
        w = rng.normal(size=(cout, cin, kk, kk))
        b = rng.normal(size=cout)
        got = N.conv2d(T.Tensor(x), T.Tensor(w), T.Tensor(b),
                       stride=stride, padding=pad, dilation=dil).data
        want = conv2d_oracle(x, w, b, stride, pad, dil)
        worst = max(worst, float(np.abs(got - want).max()))
    return worst <= ORACLE_TOL, f"max abs diff {worst:.2e}"


@_p("oracle:pam")
def oracle_pam(rng, trials):
    worst = 0.0
    for c in range(1, 7):
        for h in range(1, 5):
            for w in range(1, 5):
                pam = A.PositionAttention(max(c, 2), reduction=2, rng=rng,
                                          dtype=np.float64)
                pam.alpha.data[:] = rng.normal()
                x = rng.normal(size=(max(c, 2), h, w))
                got, amap = pam(T.Tensor(x[None]))
                want, s = pam_oracle(
                    x, pam.conv_b.weight.data, pam.conv_b.bias.data,
                    pam.conv_c.weight.data, pam.conv_c.bias.data,
                    pam.conv_d.weight.data, pam.conv_d.bias.data,
                    float(pam.alpha.data[0]))
                worst = max(worst, float(np.abs(got.data[0] - want).max()),
                            float(np.abs(amap.matrix.data - s).max()))
    return worst <= ORACLE_TOL, f"max abs diff {worst:.2e}"


@_p("oracle:cam")
def oracle_cam(rng, trials):
    worst = 0.0
    for c in range(1, 7):
        for h in range(1, 5):
            for w in range(1, 5):
                cam = A.ChannelAttention(dtype=np.float64)
                cam.beta.data[:] = rng.normal()
                x = rng.normal(size=(c, h, w))
                got, amap = cam(T.Tensor(x[None]))
                want, xmat = cam_oracle(x, float(cam.beta.data[0]))
                worst = max(worst, float(np.abs(got.data[0] - want).max()),
                            float(np.abs(amap.matrix.data - xmat).max()))
    return worst <= ORACLE_TOL, f"max abs diff {worst:.2e}"


# -- invariant properties --------------------------------------------------------


@_p("prop:identity_at_init")
def prop_identity_at_init(rng, trials):
    worst = 0.0
    for _ in range(trials):
        c = int(rng.integers(2, 9))
        h = int(rng.integers(1, 7))
        w = int(rng.integers(1, 7))
        x = T.Tensor(rng.normal(size=(1, c, h, w)))
        pam = A.PositionAttention(c, rng=rng, dtype=np.float64)
        cam = A.ChannelAttention(dtype=np.float64)
        worst = max(worst, float(np.abs(pam(x)[0].data - x.data).max()),
                    float(np.abs(cam(x)[0].data - x.data).max()))
    return worst == 0.0, f"max abs diff {worst:.2e} (must be exactly 0)"


@_p("prop:row_stochastic")
def prop_row_stochastic(rng, trials):
    worst = 0.0
    for _ in range(max(trials, 50)):
        c = int(rng.integers(2, 7))
        h = int(rng.integers(1, 5))
        w = int(rng.integers(1, 5))
        x = T.Tensor(rng.normal(size=(1, c, h, w)).astype(np.float32))
        pam = A.PositionAttention(c, reduction=2, rng=rng, dtype=np.float32)
        cam = A.ChannelAttention(dtype=np.float32)
        _, s = pam(x)
        _, xm = cam(x)
        worst = max(worst, float(np.abs(s.matrix.data.sum(-1) - 1).max()),
                    float(np.abs(xm.matrix.data.sum(-1) - 1).max()))
    return worst <= ROW_TOL, f"max |row sum - 1| = {worst:.2e}"


@_p("prop:softmax_shift_invariance")
def prop_softmax_shift(rng, trials):
    worst = 0.0
    for _ in range(trials):
        r, c = int(rng.integers(1, 6)), int(rng.integers(1, 6))
        x = rng.normal(size=(r, c))
        shift = rng.normal(size=(r, 1)) * 100
        a = T.softmax_rows(T.Tensor(x)).data
        b = T.softmax_rows(T.Tensor(x + shift)).data
        worst = max(worst, float(np.abs(a - b).max()))
    return worst <= 1e-12, f"max abs diff {worst:.2e}"


@_p("prop:pam_spatial_equivariance")
def prop_pam_equivariance(rng, trials):
    worst = 0.0
    for _ in range(trials):
        c = int(rng.integers(2, 6))
        h, w = int(rng.integers(1, 5)), int(rng.integers(1, 5))
        pam = A.PositionAttention(c, reduction=2, rng=rng, dtype=np.float64)
        pam.alpha.data[:] = rng.normal()
        x = rng.normal(size=(1, c, h, w))
        perm = rng.permutation(h * w)
        xp = x.reshape(1, c, h * w)[:, :, perm].reshape(1, c, h, w)
        out = pam(T.Tensor(x))[0].data.reshape(1, c, h * w)
        outp = pam(T.Tensor(xp))[0].data.reshape(1, c, h * w)
        worst = max(worst, float(np.abs(out[:, :, perm] - outp).max()))
    return worst <= ROW_TOL, f"max abs diff {worst:.2e}"


@_p("prop:cam_channel_equivariance")
def prop_cam_equivariance(rng, trials):
    worst = 0.0
    for _ in range(trials):
        c = int(rng.integers(1, 7))
        h, w = int(rng.integers(1, 5)), int(rng.integers(1, 5))
        cam = A.ChannelAttention(dtype=np.float64)
        cam.beta.data[:] = rng.normal()
        x = rng.normal(size=(1, c, h, w))
        perm = rng.permutation(c)
        out = cam(T.Tensor(x))[0].data
        outp = cam(T.Tensor(x[:, perm]))[0].data
        worst = max(worst, float(np.abs(out[:, perm] - outp).max()))
    return worst <= ROW_TOL, f"max abs diff {worst:.2e}"


@_p("prop:upsample_partition_of_unity")
def prop_upsample_partition(rng, trials):
    worst = 0.0
    for _ in range(trials):
        h = int(rng.integers(1, 6))
        scale = int(rng.integers(2, 5))
        mat = N.interp_matrix(h, h * scale, np.float64)
        worst = max(worst, float(np.abs(mat.sum(axis=1) - 1).max()))
        x = T.Tensor(np.full((1, 1, h, h), 3.25))
        up = N.upsample_bilinear(x, h * scale, h * scale).data
        worst = max(worst, float(np.abs(up - 3.25).max()))
    return worst <= 1e-12, f"max deviation {worst:.2e}"


def poly_lr_oracle(it: int, total: int, base_lr: str = "0.01",
                   power: str = "0.9") -> float:
    """50-digit decimal evaluation of base_lr * (1 - it/total) ** power."""
    from decimal import Decimal, getcontext
    getcontext().prec = 50
    if it == total:
        return 0.0
    x = Decimal(1) - Decimal(it) / Decimal(total)
    return float(Decimal(base_lr) * (x.ln() * Decimal(power)).exp())


@_p("prop:poly_lr_schedule")
def prop_poly_lr(rng, trials):
    worst = 0.0
    total = 1000
    for it in range(total + 1):
        got = R.poly_lr(it, total, 0.01, 0.9)
        worst = max(worst, abs(got - poly_lr_oracle(it, total)))
    exact = (R.poly_lr(0, total, 0.01, 0.9) == 0.01
             and R.poly_lr(total, total, 0.01, 0.9) == 0.0)
    decreasing = all(R.poly_lr(i, 100, 0.01, 0.9) > R.poly_lr(i + 1, 100, 0.01, 0.9)
                     for i in range(100))
    return (worst <= 1e-12 and exact and decreasing), \
        f"max abs err {worst:.2e}, endpoints exact: {exact}, decreasing: {decreasing}"


@_p("prop:miou_consistency")
def prop_miou(rng, trials):
    ok = True
    detail = []
    for _ in range(trials):
        k = int(rng.integers(2, 6))
        pred = rng.integers(0, k, size=(6, 6))
        lab = rng.integers(0, k, size=(6, 6))
        rep = R.mean_iou(pred, lab, k)
        perm = rng.permutation(k)
        rep_p = R.mean_iou(perm[pred], perm[lab], k)
        if abs(rep.mean_iou - rep_p.mean_iou) > 1e-12:
            ok = False
            detail.append("relabel invariance broken")
        acc = np.trace(rep.confusion) / rep.confusion.sum()
        if abs(acc - rep.pixel_accuracy) > 1e-12:
            ok = False
            detail.append("trace/total != pixel accuracy")
        perfect = R.mean_iou(lab, lab, k)
        if perfect.mean_iou != 1.0:
            ok = False
            detail.append("pred==labels not 1.0")
    return ok, "; ".join(detail) or "relabel invariance, accuracy identity, perfect=1"


@_p("prop:bn_normalizes")
def prop_bn(rng, trials):
    worst = 0.0
    for _ in range(trials):
        c = int(rng.integers(1, 5))
        x = T.Tensor(rng.normal(3.0, 2.0, size=(4, c, 5, 5)))
        gamma = T.Tensor(np.ones(c))
        beta = T.Tensor(np.zeros(c))
        out = N.batch_norm(x, gamma, beta, np.zeros(c), np.ones(c), training=True).data
        worst = max(worst, float(np.abs(out.mean(axis=(0, 2, 3))).max()),
                    float(np.abs(out.var(axis=(0, 2, 3)) - 1).max()))
    return worst <= 1e-3, f"max |mean|,|var-1| = {worst:.2e}"


@_p("prop:checkpoint_roundtrip")
def prop_checkpoint(rng, trials):
    import tempfile, os
    cfg = M.ModelConfig(variant="dual", backbone_channels=(4, 4, 8, 8),
                        module_channels=4, num_classes=3)
    model = M.build_model(cfg, seed=int(rng.integers(0, 2 ** 31)))
    with tempfile.TemporaryDirectory() as d:
        path = os.path.join(d, "ck.bin")
        M.save_checkpoint(path, model, {"k": 1})
        state, meta = M.load_checkpoint(path)
    before = dict(model.state_arrays())
    same = (set(state) == set(before)
            and all(np.array_equal(state[k], before[k]) for k in state)
            and meta == {"k": 1})
    return same, "byte-identical state after save/load" if same else "state mismatch"


@_p("prop:ms_inference_idempotent")
def prop_ms_inference(rng, trials):
    cfg = M.ModelConfig(variant="pam_only", backbone_channels=(4, 4, 8, 8),
                        module_channels=4, num_classes=3)
    model = M.build_model(cfg, seed=0, dtype=np.float64)
    img = rng.random(size=(3, 16, 16))
    single = R.multi_scale_inference(model, img, [1.0])
    logits = model(T.Tensor(img[None]), training=False).main_logits.data[0]
    z = logits - logits.max(axis=0, keepdims=True)
    e = np.exp(z)
    direct = e / e.sum(axis=0, keepdims=True)
    dup = R.multi_scale_inference(model, img, [1.0, 1.0])
    worst = max(float(np.abs(single - direct).max()), float(np.abs(dup - single).max()))
    return worst <= 1e-6, f"max abs diff {worst:.2e}"


@_p("prop:dataset_determinism")
def prop_dataset(rng, trials):
    cfg = D.SceneConfig()
    seed = int(rng.integers(0, 2 ** 31))
    a = D.generate_sample(cfg, seed)
    b = D.generate_sample(cfg, seed)
    same = np.array_equal(a.image, b.image) and np.array_equal(a.labels, b.labels)
    finite = np.isfinite(a.image).all() and a.image.min() >= 0 and a.image.max() <= 1
    valid = ((a.labels >= 0) & (a.labels < cfg.num_classes)).all()
    ok = bool(same and finite and valid)
    return ok, "same seed identical; image in [0,1]; labels valid" if ok else "violated"


def run_properties(trials: int = 20, seed: int = 0, names=None) -> list:
    """Execute the suite in double precision; returns PropertyResult per property."""
    results = []
    for idx, fn in enumerate(PROPERTIES):
        name = fn.property_name
        if names is not None and name not in names:
            continue
        rng = T.make_rng(seed, 3, idx)
        try:
            passed, detail = fn(rng, trials)
        except Exception as exc:  # a crash is a failure, not an abort
            passed, detail = False, f"raised {type(exc).__name__}: {exc}"
        results.append(PropertyResult(name=name, passed=bool(passed), detail=detail))
    return results


def format_report(results) -> str:
    lines = []
    for r in results:
        lines.append(f"[{'PASS' if r.passed else 'FAIL'}] {r.name}: {r.detail}")
    n_fail = sum(not r.passed for r in results)
    lines.append(f"{len(results) - n_fail}/{len(results)} properties passed")
    return "\n".join(lines)
