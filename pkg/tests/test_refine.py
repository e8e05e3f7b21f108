"""Refinement network: identity at init, affine correctness, gradients."""

import numpy as np
import pytest

from mosketch import autodiff as ad
from mosketch.autodiff import Tensor
from mosketch.errors import UsageError, ValidationError
from mosketch.planning import MotionPlan
from mosketch.refine import RefineNet, RefineNetConfig, affine_delta, sinusoidal_encoding
from mosketch.scene import PointAssignment
from mosketch.sketch import Stroke, VectorSketch

CANVAS = (256.0, 256.0)


def small_config(f=4, seed=0):
    return RefineNetConfig(d=32, f=f, layers=2, heads=4, seed=seed)


def toy_setup(rng, strokes_per_object=(3, 3), f=4):
    strokes, owner = [], []
    centers = [(70.0, 120.0), (180.0, 120.0)]
    for j, count in enumerate(strokes_per_object):
        cx, cy = centers[j]
        for _ in range(count):
            pts = rng.uniform(-30, 30, size=(4, 2)) + [cx, cy]
            strokes.append(Stroke(pts.astype(np.float32)))
            owner.extend([j] * 4)
    sk = VectorSketch(tuple(strokes), CANVAS)
    assignment = PointAssignment(np.array(owner))
    m = len(strokes_per_object)
    boxes = np.zeros((m, f, 4))
    for j in range(m):
        cx, cy = centers[j]
        for t in range(f):
            boxes[j, t] = [cx - 40 + 5 * t * (j + 1), cy - 40, 80, 80]
    plan = MotionPlan(tuple(f"obj{j}" for j in range(m)), boxes, boxes[:, 0].copy())
    dzc = rng.uniform(-3, 3, size=(sk.n, f, 2)).astype(np.float32)
    return sk, assignment, plan, dzc


def rng(seed=0):
    return np.random.Generator(np.random.Philox(seed))


# -- config -----------------------------------------------------------------

def test_config_validation():
    with pytest.raises(ValidationError):
        RefineNetConfig(d=30, heads=4)
    with pytest.raises(ValidationError):
        RefineNetConfig(layers=0)
    with pytest.raises(ValidationError):
        RefineNetConfig(f=1)
    assert RefineNetConfig(d=64).ff_dim == 256


def test_default_config_matches_documented_sizes():
    cfg = RefineNetConfig()
    assert (cfg.d, cfg.f, cfg.layers, cfg.heads, cfg.ff_dim) == (128, 16, 2, 8, 512)


# -- embedding --------------------------------------------------------------

def test_embed_shapes():
    model = RefineNet(small_config(), m=1, canvas=CANVAS)
    points = rng(1).uniform(0, 256, size=(4, 2)).astype(np.float32)
    plan_rows = rng(2).uniform(0, 200, size=(1, 4, 4))
    obj, pt = model.embed(points, plan_rows, np.zeros(4, dtype=np.intp))
    assert obj.shape == (1, 32)
    assert pt.shape == (4, 32)


def test_embed_deterministic():
    model = RefineNet(small_config(seed=3), m=2, canvas=CANVAS)
    points = rng(3).uniform(0, 256, size=(8, 2)).astype(np.float32)
    plan_rows = rng(4).uniform(0, 200, size=(2, 4, 4))
    owner = np.array([0, 0, 0, 0, 1, 1, 1, 1])
    a = model.embed(points, plan_rows, owner)
    b = model.embed(points, plan_rows, owner)
    assert np.array_equal(a[0].data, b[0].data)
    assert np.array_equal(a[1].data, b[1].data)


def test_embed_permutation_equivariance():
    # swapping two whole strokes of one object, with their positional
    # indices carried along, permutes the point embeddings identically
    model = RefineNet(small_config(), m=1, canvas=CANVAS)
    r = rng(5)
    points = r.uniform(40, 216, size=(8, 2)).astype(np.float32)  # 2 strokes
    plan_rows = r.uniform(0, 200, size=(1, 4, 4))
    owner = np.zeros(8, dtype=np.intp)
    _, pt = model.embed(points, plan_rows, owner)

    perm = np.array([4, 5, 6, 7, 0, 1, 2, 3])
    positions = np.concatenate([np.arange(1), 1 + perm])
    _, pt_perm = model.embed(points[perm], plan_rows, owner, positions=positions)
    assert np.abs(pt_perm.data - pt.data[perm]).max() < 1e-5


def test_sinusoidal_encoding_properties():
    pe = sinusoidal_encoding(np.arange(10), 32)
    assert pe.shape == (10, 32)
    assert np.allclose(pe[0, 0::2], 0.0)
    assert np.allclose(pe[0, 1::2], 1.0)
    assert not np.allclose(pe[1], pe[2])


# -- affine -----------------------------------------------------------------

def affine_reference(params, rel):
    """Explicit matrix composition, float64."""
    out = np.zeros_like(rel, dtype=np.float64)
    for t in range(params.shape[0]):
        tx, ty, sxr, syr, shx, shy, th = params[t].astype(np.float64)
        S = np.array([[1 + sxr, 0], [0, 1 + syr]])
        Sh = np.array([[1, shx], [shy, 1]])
        R = np.array([[np.cos(th), -np.sin(th)], [np.sin(th), np.cos(th)]])
        M = R @ Sh @ S
        out[:, t, :] = rel[:, t, :] @ M.T - rel[:, t, :] + [tx, ty]
    return out


def test_affine_zero_params_identity():
    r = rng(6)
    rel = r.uniform(-50, 50, size=(5, 4, 2)).astype(np.float32)
    params = Tensor(np.zeros((4, 7), dtype=np.float32))
    out = affine_delta(params, rel)
    assert np.abs(out.data).max() == 0.0


def test_affine_pure_translation():
    rel = np.array([[[1.0, 1.0]]], dtype=np.float32)  # (1, 1, 2)
    p = np.zeros((1, 7), dtype=np.float32)
    p[0, 0], p[0, 1] = 2.0, 3.0
    out = affine_delta(Tensor(p), rel)
    assert np.allclose(out.data[0, 0], [2.0, 3.0])


def test_affine_quarter_turn():
    # rotation by pi/2 about the anchor takes (1, 0) to (0, 1)
    rel = np.array([[[1.0, 0.0]]], dtype=np.float32)
    p = np.zeros((1, 7), dtype=np.float32)
    p[0, 6] = np.pi / 2
    out = affine_delta(Tensor(p), rel)
    new = rel[0, 0] + out.data[0, 0]
    assert np.allclose(new, [0.0, 1.0], atol=1e-6)


def test_affine_matches_composed_matrix():
    r = rng(7)
    for _ in range(5):
        params = (r.uniform(-0.3, 0.3, size=(3, 7))).astype(np.float32)
        params[:, :2] *= 20
        rel = r.uniform(-40, 40, size=(6, 3, 2)).astype(np.float32)
        out = affine_delta(Tensor(params), rel)
        ref = affine_reference(params, rel)
        assert np.abs(out.data - ref).max() < 1e-4


def test_affine_gradient_matches_fd():
    r = rng(8)
    params_np = (r.uniform(-0.2, 0.2, size=(2, 7))).astype(np.float32)
    rel = r.uniform(-1, 1, size=(3, 2, 2)).astype(np.float32)
    w = r.uniform(0.5, 1.5, size=(3, 2, 2)).astype(np.float32)
    params = Tensor(params_np, requires_grad=True)
    ad.sum_(ad.mul(affine_delta(params, rel), Tensor(w))).backward()

    h = 1e-3
    for (t, c) in [(0, 0), (0, 6), (1, 2), (1, 4), (0, 3), (1, 5)]:
        fd = 0.0
        for sgn in (+1, -1):
            p = params_np.astype(np.float64).copy()
            p[t, c] += sgn * h
            fd += sgn * float((affine_reference(p, rel) * w).sum())
        fd /= 2 * h
        an = params.grad[t, c]
        assert abs(an - fd) <= max(1e-3 * max(abs(an), abs(fd)), 3e-4)


# -- heads ------------------------------------------------------------------

def test_identity_at_init_exact():
    for seed in range(3):
        r = rng(100 + seed)
        sk, assignment, plan, dzc = toy_setup(r)
        model = RefineNet(small_config(seed=seed), m=2, canvas=CANVAS)
        out = model.forward(sk, plan, assignment, dzc)
        assert np.abs(out["dz_o"].data).max() == 0.0
        assert np.abs(out["dz_p"].data).max() == 0.0
        assert np.array_equal(out["dz"].data, dzc)


def test_point_head_shapes_and_unknown_object():
    model = RefineNet(small_config(f=16), m=2, canvas=CANVAS)
    emb = Tensor(np.zeros((8, 32), dtype=np.float32))
    out = model.point_deltas(emb, 1)
    assert out.shape == (8, 16, 2)
    with pytest.raises(UsageError):
        model.point_deltas(emb, 2)
    with pytest.raises(UsageError):
        model.transform_params(Tensor(np.zeros(32, dtype=np.float32)), 5)


def test_forward_ablation_identities():
    r = rng(9)
    sk, assignment, plan, dzc = toy_setup(r)
    model = RefineNet(small_config(seed=1), m=2, canvas=CANVAS)
    # nudge head weights off zero so dz_o / dz_p are nonzero when enabled
    for name, t in model.named_parameters().items():
        if name.startswith("heads.") and name.endswith(".w2"):
            t.data = t.data + 0.01

    out = model.forward(sk, plan, assignment, dzc)
    assert np.abs(out["dz_o"].data).max() > 0
    assert np.abs(out["dz_p"].data).max() > 0

    no_c = model.forward(sk, plan, assignment, dzc, no_coarse=True)
    assert np.abs(no_c["dz_c"]).max() == 0.0
    assert np.allclose(no_c["dz"].data, no_c["dz_o"].data + no_c["dz_p"].data,
                       atol=1e-6)

    no_o = model.forward(sk, plan, assignment, dzc, no_object_refine=True)
    assert np.abs(no_o["dz_o"].data).max() == 0.0

    no_p = model.forward(sk, plan, assignment, dzc, no_point_refine=True)
    assert np.abs(no_p["dz_p"].data).max() == 0.0

    playback = model.forward(sk, plan, assignment, dzc,
                             no_object_refine=True, no_point_refine=True)
    assert np.array_equal(playback["dz"].data, dzc)


def test_not_object_aware_single_shared_heads():
    r = rng(10)
    sk, assignment, plan, dzc = toy_setup(r)
    model = RefineNet(small_config(seed=2), m=2, canvas=CANVAS, object_aware=False)
    names = model.named_parameters()
    assert "heads.transform.0.w2" in names
    assert "heads.transform.1.w2" not in names
    assert names["owner_emb"].shape == (1, 32)
    out = model.forward(sk, plan, assignment, dzc)
    assert out["dz"].shape == (sk.n, 4, 2)
    assert np.array_equal(out["dz"].data, dzc)  # zero-init still identity


def test_forward_end_to_end_gradients_match_fd():
    # a scalar loss on dz must differentiate through attention, both heads,
    # and the affine; spot-check a few parameters of each kind against FD
    r = rng(11)
    sk, assignment, plan, dzc = toy_setup(r, strokes_per_object=(2, 1), f=3)
    cfg = RefineNetConfig(d=16, f=3, layers=1, heads=2, seed=4)
    model = RefineNet(cfg, m=2, canvas=CANVAS)
    for name, t in model.named_parameters().items():
        if name.startswith("heads.") and name.endswith(".w2"):
            t.data = (rng(12).normal(0, 0.02, size=t.data.shape)).astype(np.float32)

    w = rng(13).uniform(0.5, 1.5, size=(sk.n, 3, 2)).astype(np.float32)

    def loss_value():
        out = model.forward(sk, plan, assignment, dzc)
        return ad.sum_(ad.mul(out["dz"], Tensor(w)))

    loss = loss_value()
    loss.backward()
    checks = [
        ("pt_in.w1", (0, 3)), ("obj_in.w1", (5, 2)),
        ("layers.0.attn.wq", (2, 7)), ("layers.0.ff.w1", (3, 11)),
        ("heads.transform.0.w2", (4, 6)), ("heads.point.1.w2", (2, 3)),
        ("owner_emb", (1, 5)),
    ]
    h = 1e-2
    for name, idx in checks:
        t = model.named_parameters()[name]
        an = t.grad[idx]
        orig = float(t.data[idx])
        vals = []
        for sgn in (+1, -1):
            t.data[idx] = orig + sgn * h
            vals.append(float(loss_value().data))
        t.data[idx] = orig
        fd = (vals[0] - vals[1]) / (2 * h)
        assert abs(an - fd) <= max(2e-2 * max(abs(an), abs(fd)), 2e-3), \
            f"{name}{idx}: an={an} fd={fd}"


def test_checkpoint_roundtrip_bit_identical(tmp_path):
    from mosketch.autodiff import load_checkpoint, save_checkpoint
    model = RefineNet(small_config(seed=7), m=2, canvas=CANVAS)
    state = model.state_arrays()
    save_checkpoint(tmp_path / "m.ckpt", state)
    model2 = RefineNet(small_config(seed=8), m=2, canvas=CANVAS)
    model2.load_state_arrays(load_checkpoint(tmp_path / "m.ckpt"))
    for k, v in model2.state_arrays().items():
        assert np.array_equal(v, state[k]), k


def test_same_seed_same_init():
    a = RefineNet(small_config(seed=9), m=2, canvas=CANVAS).state_arrays()
    b = RefineNet(small_config(seed=9), m=2, canvas=CANVAS).state_arrays()
    c = RefineNet(small_config(seed=10), m=2, canvas=CANVAS).state_arrays()
    assert all(np.array_equal(a[k], b[k]) for k in a)
    assert any(not np.array_equal(a[k], c[k]) for k in a)
