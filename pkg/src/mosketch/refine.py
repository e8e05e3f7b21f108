"""Multi-grained motion refinement network.

Control points and planned boxes are embedded by small MLPs, mixed by a
shared transformer over one token per object plus one token per point,
and decoded by per-object heads: a transform head emitting 7 affine
parameters per frame (object-level motion) and a point head emitting a
2D residual per point per frame (point-level motion). Both heads have
zero-initialized final layers, so a fresh model contributes nothing and
the output trajectory starts exactly at the coarse motion.

Output composition: dz = dz_coarse + dz_object + dz_point.

Conventions fixed here (documented, configurable where noted):
  - inputs are normalized to [-1, 1] by the canvas before the MLPs;
  - translation-like outputs (affine t, point residuals) are scaled by
    canvas/2 back into canvas units;
  - the affine acts about the object's frame-0 centroid (coarse motion
    included), in order scale -> shear -> rotate -> translate, with
    scale = 1 + raw, shear = raw, angle = raw radians;
  - positional encoding is sinusoidal over the token index, and point
    tokens additionally receive a learned owner-object embedding.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ShapeError, UsageError, ValidationError
from .planning import MotionPlan
from .scene import PointAssignment
from .sketch import VectorSketch


@dataclass(frozen=True)
class RefineNetConfig:
    d: int = 128
    f: int = 16
    layers: int = 2
    heads: int = 8
    ff_dim: int = 0  # 0 means 4 * d
    seed: int = 0

    def __post_init__(self):
        if self.d % self.heads != 0:
            raise ValidationError(f"d={self.d} not divisible by heads={self.heads}")
        if self.layers < 1:
            raise ValidationError("layers must be >= 1")
        if self.f < 2:
            raise ValidationError("f must be >= 2")
        if self.ff_dim == 0:
            object.__setattr__(self, "ff_dim", 4 * self.d)


def sinusoidal_encoding(positions: np.ndarray, d: int) -> np.ndarray:
    positions = np.asarray(positions, dtype=np.float64)
    i = np.arange(d // 2, dtype=np.float64)
    freq = 1.0 / (10000.0 ** (2.0 * i / d))
    ang = positions[:, None] * freq[None, :]
    pe = np.zeros((positions.shape[0], d), dtype=np.float32)
    pe[:, 0::2] = np.sin(ang)
    pe[:, 1::2] = np.cos(ang)
    return pe


def affine_delta(params: Tensor, rel: np.ndarray) -> Tensor:
    """Displacement of points under per-frame affines about their anchor.

    params: (f, 7) rows [t_x, t_y, s_x, s_y, sh_x, sh_y, theta], with
    translation already in canvas units. rel: (k, f, 2) anchor-relative
    positions. Returns (k, f, 2): (M - I) rel + t, where
    M = R(theta) @ Shear(sh) @ Scale(1 + s).
    """
    if params.shape[1] != 7:
        raise ShapeError(f"affine params must be (f, 7), got {params.shape}")
    f = params.shape[0]
    if rel.shape[1] != f or rel.shape[2] != 2:
        raise ShapeError(f"rel must be (k, {f}, 2), got {rel.shape}")
    tx = params[:, 0]
    ty = params[:, 1]
    sx = ad.add(params[:, 2], 1.0)
    sy = ad.add(params[:, 3], 1.0)
    shx = params[:, 4]
    shy = params[:, 5]
    theta = params[:, 6]
    c = ad.cos(theta)
    s = ad.sin(theta)
    m11 = ad.mul(c - ad.mul(s, shy), sx)
    m12 = ad.mul(ad.mul(c, shx) - s, sy)
    m21 = ad.mul(s + ad.mul(c, shy), sx)
    m22 = ad.mul(ad.mul(s, shx) + c, sy)
    rx = Tensor(rel[:, :, 0])  # (k, f)
    ry = Tensor(rel[:, :, 1])
    dx = ad.mul(m11, rx) + ad.mul(m12, ry) - rx + tx
    dy = ad.mul(m21, rx) + ad.mul(m22, ry) - ry + ty
    k = rel.shape[0]
    return ad.concat([ad.reshape(dx, (k, f, 1)), ad.reshape(dy, (k, f, 1))], axis=2)


class RefineNet:
    """One model instance per sketch; optimized in place, never pretrained."""

    def __init__(self, config: RefineNetConfig, m: int,
                 canvas: tuple[float, float], object_aware: bool = True):
        if m < 1:
            raise ValidationError("model needs at least one object")
        self.config = config
        self.m = m
        self.canvas = (float(canvas[0]), float(canvas[1]))
        self.object_aware = bool(object_aware)
        self.head_count = m if object_aware else 1
        self._params: dict[str, Tensor] = {}
        self._init_params()

    # -- parameters ---------------------------------------------------------

    def _add(self, name: str, arr: np.ndarray) -> Tensor:
        t = Tensor(arr.astype(np.float32), requires_grad=True)
        self._params[name] = t
        return t

    def _linear_init(self, rng, fan_in: int, fan_out: int) -> np.ndarray:
        return rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=(fan_in, fan_out))

    def _init_params(self):
        cfg = self.config
        d, f = cfg.d, cfg.f
        rng = ad.generator(cfg.seed, "init")
        for prefix, fan_in in (("pt_in", 2), ("obj_in", f * 4)):
            self._add(f"{prefix}.w1", self._linear_init(rng, fan_in, d))
            self._add(f"{prefix}.b1", np.zeros(d))
            self._add(f"{prefix}.w2", self._linear_init(rng, d, d))
            self._add(f"{prefix}.b2", np.zeros(d))
        self._add("owner_emb", rng.normal(0.0, 0.02, size=(self.head_count, d)))
        for layer in range(cfg.layers):
            p = f"layers.{layer}"
            self._add(f"{p}.ln1.gamma", np.ones(d))
            self._add(f"{p}.ln1.beta", np.zeros(d))
            for nm in ("wq", "wk", "wv", "wo"):
                self._add(f"{p}.attn.{nm}", self._linear_init(rng, d, d))
            for nm in ("bq", "bk", "bv", "bo"):
                self._add(f"{p}.attn.{nm}", np.zeros(d))
            self._add(f"{p}.ln2.gamma", np.ones(d))
            self._add(f"{p}.ln2.beta", np.zeros(d))
            self._add(f"{p}.ff.w1", self._linear_init(rng, d, cfg.ff_dim))
            self._add(f"{p}.ff.b1", np.zeros(cfg.ff_dim))
            self._add(f"{p}.ff.w2", self._linear_init(rng, cfg.ff_dim, d))
            self._add(f"{p}.ff.b2", np.zeros(d))
        for j in range(self.head_count):
            for kind, out in (("transform", f * 7), ("point", f * 2)):
                p = f"heads.{kind}.{j}"
                self._add(f"{p}.w1", self._linear_init(rng, d, d))
                self._add(f"{p}.b1", np.zeros(d))
                # zero final layer: the head contributes nothing at step 0
                self._add(f"{p}.w2", np.zeros((d, out)))
                self._add(f"{p}.b2", np.zeros(out))

    def parameters(self) -> list[Tensor]:
        return list(self._params.values())

    def named_parameters(self) -> dict[str, Tensor]:
        return dict(self._params)

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self._params.items()}

    def load_state_arrays(self, state: dict[str, np.ndarray]):
        missing = set(self._params) - set(state)
        if missing:
            raise ValidationError(f"checkpoint missing parameters: {sorted(missing)[:4]}")
        for k, t in self._params.items():
            arr = np.asarray(state[k], dtype=np.float32)
            if arr.shape != t.data.shape:
                raise ShapeError(f"parameter {k}: checkpoint shape {arr.shape} "
                                 f"!= model shape {t.data.shape}")
            t.data = arr.copy()

    # -- building blocks ----------------------------------------------------

    def _mlp2(self, x: Tensor, prefix: str) -> Tensor:
        # softplus: smooth everywhere (central-difference checks stay well
        # posed) yet non-saturating, unlike tanh
        h = ad.softplus(ad.add(ad.matmul(x, self._params[f"{prefix}.w1"]),
                               self._params[f"{prefix}.b1"]))
        return ad.add(ad.matmul(h, self._params[f"{prefix}.w2"]),
                      self._params[f"{prefix}.b2"])

    def _layer_norm(self, x: Tensor, prefix: str) -> Tensor:
        return ad.add(ad.mul(ad.layer_norm(x), self._params[f"{prefix}.gamma"]),
                      self._params[f"{prefix}.beta"])

    def _attention(self, x: Tensor, prefix: str) -> Tensor:
        cfg = self.config
        T = x.shape[0]
        h, dh = cfg.heads, cfg.d // cfg.heads
        p = self._params

        def proj(nm):
            out = ad.add(ad.matmul(x, p[f"{prefix}.w{nm}"]), p[f"{prefix}.b{nm}"])
            return ad.transpose(ad.reshape(out, (T, h, dh)), (1, 0, 2))  # (h, T, dh)

        q, k, v = proj("q"), proj("k"), proj("v")
        scores = ad.mul(ad.matmul(q, ad.transpose(k, (0, 2, 1))), 1.0 / np.sqrt(dh))
        attn = ad.softmax(scores, axis=-1)  # (h, T, T)
        mixed = ad.matmul(attn, v)  # (h, T, dh)
        merged = ad.reshape(ad.transpose(mixed, (1, 0, 2)), (T, cfg.d))
        return ad.add(ad.matmul(merged, p[f"{prefix}.wo"]), p[f"{prefix}.bo"])

    def _transformer(self, tokens: Tensor) -> Tensor:
        x = tokens
        for layer in range(self.config.layers):
            p = f"layers.{layer}"
            x = ad.add(x, self._attention(self._layer_norm(x, f"{p}.ln1"), f"{p}.attn"))
            x = ad.add(x, self._mlp2(self._layer_norm(x, f"{p}.ln2"), f"{p}.ff"))
        return x

    # -- embedding ----------------------------------------------------------

    def _normalize_points(self, points: np.ndarray) -> np.ndarray:
        cw, ch = self.canvas
        return (2.0 * points / np.array([cw, ch]) - 1.0).astype(np.float32)

    def _normalize_plan(self, plan_boxes: np.ndarray) -> np.ndarray:
        """(m, f, 4) boxes -> (m, f*4) rows normalized to [-1, 1]."""
        cw, ch = self.canvas
        scale = np.array([cw, ch, cw, ch])
        norm = 2.0 * plan_boxes / scale - 1.0
        return norm.reshape(plan_boxes.shape[0], -1).astype(np.float32)

    def embed(self, points: np.ndarray, plan_rows: np.ndarray,
              owner: np.ndarray, positions: np.ndarray | None = None
              ) -> tuple[Tensor, Tensor]:
        """Token sequence = object tokens then point tokens, shared transformer.

        points: (n, 2) canvas units; plan_rows: (m_eff, f*4) canvas units
        flattened per object; owner: (n,) indices into the owner embedding.
        positions overrides the positional-encoding index per token (length
        m_eff + n); by default tokens are numbered by sequence order.
        """
        m_eff = plan_rows.shape[0]
        n = points.shape[0]
        if owner.shape[0] != n:
            raise ShapeError(f"owner has {owner.shape[0]} entries for {n} points")
        obj_tok = self._mlp2(Tensor(self._normalize_plan_rows(plan_rows)), "obj_in")
        pt_tok = self._mlp2(Tensor(self._normalize_points(points)), "pt_in")
        pt_tok = ad.add(pt_tok, ad.gather_rows(self._params["owner_emb"],
                                               np.asarray(owner, dtype=np.intp)))
        tokens = ad.concat([obj_tok, pt_tok], axis=0)
        if positions is None:
            positions = np.arange(m_eff + n)
        elif len(positions) != m_eff + n:
            raise ShapeError(f"positions must have length {m_eff + n}")
        pe = sinusoidal_encoding(np.asarray(positions), self.config.d)
        mixed = self._transformer(ad.add(tokens, Tensor(pe)))
        return mixed[:m_eff], mixed[m_eff:]

    def _normalize_plan_rows(self, plan_rows: np.ndarray) -> np.ndarray:
        if plan_rows.ndim == 3:
            return self._normalize_plan(plan_rows)
        cw, ch = self.canvas
        f = self.config.f
        scale = np.tile(np.array([cw, ch, cw, ch]), f)
        return (2.0 * plan_rows / scale - 1.0).astype(np.float32)

    # -- decoding -----------------------------------------------------------

    def transform_params(self, obj_emb_row: Tensor, j: int) -> Tensor:
        """(f, 7) affine parameters; translation columns in canvas units."""
        if not 0 <= j < self.head_count:
            raise UsageError(f"no transform head {j} (model has {self.head_count})")
        out = self._mlp2(ad.reshape(obj_emb_row, (1, self.config.d)),
                         f"heads.transform.{j}")
        raw = ad.reshape(out, (self.config.f, 7))
        cw, ch = self.canvas
        scale = np.ones((1, 7), dtype=np.float32)
        scale[0, 0] = cw / 2.0
        scale[0, 1] = ch / 2.0
        return ad.mul(raw, Tensor(scale))

    def point_deltas(self, pt_emb: Tensor, j: int) -> Tensor:
        """(k, f, 2) per-point residual translations in canvas units."""
        if not 0 <= j < self.head_count:
            raise UsageError(f"no point head {j} (model has {self.head_count})")
        k = pt_emb.shape[0]
        out = self._mlp2(pt_emb, f"heads.point.{j}")
        raw = ad.reshape(out, (k, self.config.f, 2))
        cw, ch = self.canvas
        scale = np.array([cw / 2.0, ch / 2.0], dtype=np.float32)
        return ad.mul(raw, Tensor(scale))

    # -- forward ------------------------------------------------------------

    def forward(self, sketch: VectorSketch, plan: MotionPlan,
                assignment: PointAssignment, dz_coarse: np.ndarray,
                no_coarse: bool = False, no_object_refine: bool = False,
                no_point_refine: bool = False) -> dict:
        """Compose dz = dz_c + dz_o + dz_p; returns all addends for logging.

        dz_coarse: (n, f, 2). With no_coarse it is replaced by zeros before
        anchoring, so the network refines from the resting sketch.
        """
        cfg = self.config
        n, f = sketch.n, cfg.f
        if dz_coarse.shape != (n, f, 2):
            raise ShapeError(f"dz_coarse must be ({n}, {f}, 2), got {dz_coarse.shape}")
        if plan.f != f:
            raise ShapeError(f"plan has f={plan.f}, model f={f}")
        dzc = np.zeros_like(dz_coarse) if no_coarse else np.asarray(
            dz_coarse, dtype=np.float32)

        if self.object_aware:
            owner = assignment.owner
            groups = [assignment.points_of(j) for j in range(self.m)]
            plan_input = plan.boxes  # (m, f, 4)
        else:
            owner = np.zeros(n, dtype=np.intp)
            groups = [np.arange(n)]
            x0 = plan.boxes[:, :, 0].min(axis=0)
            y0 = plan.boxes[:, :, 1].min(axis=0)
            x1 = (plan.boxes[:, :, 0] + plan.boxes[:, :, 2]).max(axis=0)
            y1 = (plan.boxes[:, :, 1] + plan.boxes[:, :, 3]).max(axis=0)
            plan_input = np.stack([x0, y0, x1 - x0, y1 - y0], axis=-1)[None]

        base = sketch.points.astype(np.float32)
        zeros = Tensor(np.zeros((n, f, 2), dtype=np.float32))
        need_net = not (no_object_refine and no_point_refine)
        dzo = dzp = zeros
        if need_net:
            obj_emb, pt_emb = self.embed(base, plan_input, owner)
            order = np.concatenate([g for g in groups if g.size])
            # groups partition [0, n), so argsort inverts the permutation
            inv = np.argsort(order, kind="stable")

            def scatter(parts: list[Tensor]) -> Tensor:
                cat = ad.concat(parts, axis=0)
                return ad.gather_rows(cat, inv)

            if not no_object_refine:
                parts = []
                for j, idx in enumerate(groups):
                    if idx.size == 0:
                        continue
                    params = self.transform_params(obj_emb[j], j)
                    frame0 = base[idx] + dzc[idx, 0, :]
                    anchor = frame0.mean(axis=0)
                    rel = (base[idx][:, None, :] + dzc[idx]) - anchor
                    parts.append(affine_delta(params, rel.astype(np.float32)))
                dzo = scatter(parts)
            if not no_point_refine:
                parts = []
                for j, idx in enumerate(groups):
                    if idx.size == 0:
                        continue
                    parts.append(self.point_deltas(ad.gather_rows(pt_emb, idx), j))
                dzp = scatter(parts)

        dz = ad.add(ad.add(Tensor(dzc), dzo), dzp)
        return {"dz": dz, "dz_c": dzc, "dz_o": dzo, "dz_p": dzp}
