"""Image-conditioned prediction heads.

Patch-feature conv encoders (key / output / viewpoint, separate weights),
the four-quadrant multi-hypothesis viewpoint head, the bone-token
articulation transformer, and the lighting head.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tape
from .fields import MLP, _xavier
from .geometry import azimuth_of_rotation
from .skeleton import Skeleton, clamp_rotations
from .tape import Tensor

QUADRANT_BASES = np.deg2rad(np.array([45.0, 135.0, 225.0, 315.0]))
AZIMUTH_SPAN = np.pi / 4.0            # +-45 deg about the quadrant base
ELEVATION_SPAN = np.deg2rad(30.0)
ROLL_SPAN = np.deg2rad(30.0)
TRANS_XY = 0.4
TRANS_Z = 1.0


def _conv_indices(c: int, hp: int, wp: int, k: int, stride: int):
    ho = (hp - k) // stride + 1
    wo = (wp - k) // stride + 1
    ci, ki, kj = np.meshgrid(np.arange(c), np.arange(k), np.arange(k), indexing="ij")
    patch = (ci * hp * wp + ki * wp + kj).reshape(-1)            # (C*k*k,)
    oy, ox = np.meshgrid(np.arange(ho), np.arange(wo), indexing="ij")
    offs = (oy * stride * wp + ox * stride).reshape(-1)          # (L,)
    return (patch[:, None] + offs[None, :]).reshape(-1), ho, wo


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, stride: int, padding: int) -> Tensor:
    """x: (S, C, H, W); weight: (O, C, k, k) -> (S, O, H', W')."""
    s, c, h, w = x.shape
    o, _, k, _ = weight.shape
    xp = tape.pad2d(x, padding)
    hp, wp = h + 2 * padding, w + 2 * padding
    idx, ho, wo = _conv_indices(c, hp, wp, k, stride)
    cols = tape.gather(tape.reshape(xp, (s, c * hp * wp)), idx, axis=1)
    cols = tape.reshape(cols, (s, c * k * k, ho * wo))
    w2 = tape.reshape(weight, (o, c * k * k))
    out = tape.einsum("oi,sil->sol", w2, cols)
    out = tape.add(out, tape.reshape(bias, (1, o, 1)))
    return tape.reshape(out, (s, o, ho, wo))


class ConvEncoder:
    """Conv(k4,s2,p1)+GN+LReLU(0.2) repeated down to 4x4, then
    Conv(k4,s2,p0) to a 1x1 global code."""

    def __init__(self, rng: np.random.Generator, in_channels: int,
                 channels: int = 256, gn_groups: int = 64, dtype=np.float64):
        self.in_channels = in_channels
        self.channels = channels
        self.gn_groups = min(gn_groups, channels)
        if channels % self.gn_groups:
            raise ValueError("channels must be divisible by the GN groups")
        self.dtype = dtype
        self.rng = rng
        self.layers: list[dict] = []   # built lazily for the input size
        self._built_for = None

    def _build(self, hp: int):
        if self._built_for == hp:
            return
        if self._built_for is not None:
            raise ValueError(f"encoder built for {self._built_for}, got {hp}")
        if hp < 8 or (hp & (hp - 1)) != 0:
            raise ValueError(f"spatial size {hp} must be a power of two >= 8")
        self.layers = []
        size, cin = hp, self.in_channels
        while size > 4:
            w = Tensor(_xavier(self.rng, cin * 16, self.channels, self.dtype)
                       .reshape(self.channels, cin, 4, 4))
            self.layers.append({
                "w": w,
                "b": Tensor(np.zeros(self.channels, dtype=self.dtype)),
                "gamma": Tensor(np.ones(self.channels, dtype=self.dtype)),
                "beta": Tensor(np.zeros(self.channels, dtype=self.dtype)),
                "stride": 2, "pad": 1, "norm": True,
            })
            size //= 2
            cin = self.channels
        w = Tensor(_xavier(self.rng, cin * 16, self.channels, self.dtype)
                   .reshape(self.channels, cin, 4, 4))
        self.layers.append({"w": w, "b": Tensor(np.zeros(self.channels, dtype=self.dtype)),
                            "stride": 2, "pad": 0, "norm": False})
        self._built_for = hp

    def named_params(self):
        for i, layer in enumerate(self.layers):
            yield f"conv{i}.w", layer["w"]
            yield f"conv{i}.b", layer["b"]
            if layer["norm"]:
                yield f"conv{i}.gamma", layer["gamma"]
                yield f"conv{i}.beta", layer["beta"]

    def __call__(self, patches) -> Tensor:
        x = patches if isinstance(patches, Tensor) else Tensor(np.asarray(patches))
        s, c, hp, wp = x.shape
        if hp != wp:
            raise ValueError("patch features must be square")
        if c != self.in_channels:
            raise ValueError(f"expected {self.in_channels} channels, got {c}")
        self._build(hp)
        for layer in self.layers:
            x = conv2d(x, layer["w"], layer["b"], layer["stride"], layer["pad"])
            if layer["norm"]:
                x = tape.group_norm(x, self.gn_groups, layer["gamma"], layer["beta"])
                x = tape.leaky_relu(x, 0.2)
        return tape.reshape(x, (s, self.channels))


@dataclass
class ViewHypotheses:
    rot: Tensor          # (S, 4, 3, 3)
    trans: Tensor        # (S, 3), shared across hypotheses
    scores: Tensor       # (S, 4)
    azimuth: np.ndarray  # (S, 4) azimuth per hypothesis (data only)


def _rotation_stack(azim: Tensor, elev: Tensor, roll: Tensor) -> Tensor:
    """Batched view rotations Rz(roll) Rx(elev) Ry(-azim); inputs (...,)."""
    ca, sa = tape.cos(azim), tape.sin(azim)
    ce, se = tape.cos(elev), tape.sin(elev)
    cr, sr = tape.cos(roll), tape.sin(roll)
    one = tape.add(tape.mul(ca, 0.0), 1.0)
    zero = tape.mul(ca, 0.0)
    ry = tape.stack([tape.stack([ca, zero, tape.neg(sa)], -1),
                     tape.stack([zero, one, zero], -1),
                     tape.stack([sa, zero, ca], -1)], -2)
    rx = tape.stack([tape.stack([one, zero, zero], -1),
                     tape.stack([zero, ce, tape.neg(se)], -1),
                     tape.stack([zero, se, ce], -1)], -2)
    rz = tape.stack([tape.stack([cr, tape.neg(sr), zero], -1),
                     tape.stack([sr, cr, zero], -1),
                     tape.stack([zero, zero, one], -1)], -2)
    return tape.einsum("...ij,...jk->...ik", tape.einsum("...ij,...jk->...ik", rz, rx), ry)


class ViewpointHead:
    """Four bounded-residual rotation hypotheses with scores, shared
    bounded translation.  Zero-init output puts azimuths exactly on the
    quadrant bases."""

    def __init__(self, rng: np.random.Generator, feat_dim: int, width: int = 128,
                 azimuth_only: bool = False, dtype=np.float64):
        self.azimuth_only = azimuth_only
        self.mlp = MLP(feat_dim, 4 * 4 + 3, width, 3, rng, activation="leaky_relu",
                       zero_init_last=True, dtype=dtype)

    def named_params(self):
        return self.mlp.named_params()

    def __call__(self, phi_vp) -> ViewHypotheses:
        x = phi_vp if isinstance(phi_vp, Tensor) else Tensor(np.asarray(phi_vp))
        out = self.mlp(x)                               # (S, 19)
        s = out.shape[0]
        hyp = tape.reshape(out[:, :16], (s, 4, 4))
        azim = tape.add(tape.mul(tape.tanh(hyp[:, :, 0]), AZIMUTH_SPAN),
                        QUADRANT_BASES.astype(out.dtype))
        if self.azimuth_only:
            elev = tape.mul(hyp[:, :, 1], 0.0)
            roll = tape.mul(hyp[:, :, 2], 0.0)
        else:
            elev = tape.mul(tape.tanh(hyp[:, :, 1]), ELEVATION_SPAN)
            roll = tape.mul(tape.tanh(hyp[:, :, 2]), ROLL_SPAN)
        scores = hyp[:, :, 3]
        rot = _rotation_stack(azim, elev, roll)
        trans = tape.stack([
            tape.mul(tape.tanh(out[:, 16]), TRANS_XY),
            tape.mul(tape.tanh(out[:, 17]), TRANS_XY),
            tape.mul(tape.tanh(out[:, 18]), TRANS_Z),
        ], axis=-1)
        return ViewHypotheses(rot=rot, trans=trans, scores=scores,
                              azimuth=azim.numpy() % (2 * np.pi))


def hypothesis_probs(scores, tau: float) -> Tensor:
    """p_k = softmax(-sigma_k / tau)."""
    if tau <= 0:
        raise ValueError("temperature must be positive")
    s = scores if isinstance(scores, Tensor) else Tensor(np.asarray(scores))
    return tape.softmax(tape.mul(s, -1.0 / tau), axis=-1)


def sample_hypothesis(probs: np.ndarray, rng: np.random.Generator,
                      warmup: bool, explore_prob: float = 0.2) -> np.ndarray:
    """Warmup: uniform over 4.  After: argmax p with prob 0.8, else uniform."""
    p = np.asarray(probs)
    s, k = p.shape
    if warmup:
        return rng.integers(0, k, size=s)
    pick = rng.uniform(size=s) < explore_prob
    ks = np.argmax(p, axis=1)
    ks[pick] = rng.integers(0, k, size=int(pick.sum()))
    return ks


def bilinear_sample_batched(imgs: Tensor, sample_idx: np.ndarray, u, v) -> Tensor:
    """Sample imgs (S, H, W, C) at per-item (sample, u, v); zero outside."""
    s, h, w, c = imgs.shape
    flat = tape.reshape(imgs, (s * h * w, c))
    uv, vv = (u.numpy() if isinstance(u, Tensor) else np.asarray(u),
              v.numpy() if isinstance(v, Tensor) else np.asarray(v))
    u0 = np.floor(uv).astype(np.int64)
    v0 = np.floor(vv).astype(np.int64)
    fu = tape.sub(u, u0.astype(imgs.dtype))
    fv = tape.sub(v, v0.astype(imgs.dtype))
    out = None
    for dv, du, wgt in ((0, 0, tape.mul(tape.sub(1.0, fv), tape.sub(1.0, fu))),
                        (0, 1, tape.mul(tape.sub(1.0, fv), fu)),
                        (1, 0, tape.mul(fv, tape.sub(1.0, fu))),
                        (1, 1, tape.mul(fv, fu))):
        vi, ui = v0 + dv, u0 + du
        inside = ((vi >= 0) & (vi < h) & (ui >= 0) & (ui < w)).astype(imgs.dtype)
        vic, uic = np.clip(vi, 0, h - 1), np.clip(ui, 0, w - 1)
        corner = tape.gather(flat, sample_idx * h * w + vic * w + uic)
        term = tape.mul(corner, tape.reshape(tape.mul(wgt, inside), wgt.shape + (1,)))
        out = term if out is None else tape.add(out, term)
    return out


class ArticulationTransformer:
    """Bone-token transformer: 4 pre-LN blocks, 4 heads, width 128.

    Tokens are (phi_k, patch features at the projected bone midpoint, bone
    index, rest joint offset, projected pixel); the zero-initialised head
    outputs the rest pose at the start of training.
    """

    def __init__(self, rng: np.random.Generator, feat_dim: int, patch_channels: int,
                 width: int = 128, blocks: int = 4, heads: int = 4, dtype=np.float64):
        self.width = width
        self.heads = heads
        token_dim = feat_dim + patch_channels + 1 + 3 + 2
        self.embed = Tensor(_xavier(rng, token_dim, width, dtype))
        self.embed_b = Tensor(np.zeros(width, dtype=dtype))
        self.blocks = []
        for _ in range(blocks):
            self.blocks.append({
                "ln1_g": Tensor(np.ones(width, dtype=dtype)),
                "ln1_b": Tensor(np.zeros(width, dtype=dtype)),
                "qkv": Tensor(_xavier(rng, width, 3 * width, dtype)),
                "qkv_b": Tensor(np.zeros(3 * width, dtype=dtype)),
                "proj": Tensor(_xavier(rng, width, width, dtype)),
                "proj_b": Tensor(np.zeros(width, dtype=dtype)),
                "ln2_g": Tensor(np.ones(width, dtype=dtype)),
                "ln2_b": Tensor(np.zeros(width, dtype=dtype)),
                "fc1": Tensor(_xavier(rng, width, 4 * width, dtype)),
                "fc1_b": Tensor(np.zeros(4 * width, dtype=dtype)),
                "fc2": Tensor(_xavier(rng, 4 * width, width, dtype)),
                "fc2_b": Tensor(np.zeros(width, dtype=dtype)),
            })
        self.head_ln_g = Tensor(np.ones(width, dtype=dtype))
        self.head_ln_b = Tensor(np.zeros(width, dtype=dtype))
        self.head = Tensor(np.zeros((width, 3), dtype=dtype))
        self.head_b = Tensor(np.zeros(3, dtype=dtype))

    def named_params(self):
        yield "embed.w", self.embed
        yield "embed.b", self.embed_b
        for i, blk in enumerate(self.blocks):
            for k, v in blk.items():
                yield f"block{i}.{k}", v
        yield "head.ln_g", self.head_ln_g
        yield "head.ln_b", self.head_ln_b
        yield "head.w", self.head
        yield "head.b", self.head_b

    def __call__(self, tokens: Tensor) -> Tensor:
        """tokens: (S, T, token_dim) -> raw Euler angles (S, T, 3)."""
        s, t, _ = tokens.shape
        x = tape.add(tape.einsum("std,dw->stw", tokens, self.embed), self.embed_b)
        hd = self.width // self.heads
        for blk in self.blocks:
            y = tape.layer_norm(x, blk["ln1_g"], blk["ln1_b"])
            qkv = tape.add(tape.einsum("stw,wv->stv", y, blk["qkv"]), blk["qkv_b"])
            qkv = tape.reshape(qkv, (s, t, 3, self.heads, hd))
            q = tape.transpose(qkv[:, :, 0], (0, 2, 1, 3))     # (S, h, T, hd)
            k = tape.transpose(qkv[:, :, 1], (0, 2, 1, 3))
            v = tape.transpose(qkv[:, :, 2], (0, 2, 1, 3))
            att = tape.einsum("shtd,shud->shtu", q, k)
            att = tape.softmax(tape.mul(att, 1.0 / np.sqrt(hd)), axis=-1)
            o = tape.einsum("shtu,shud->shtd", att, v)
            o = tape.reshape(tape.transpose(o, (0, 2, 1, 3)), (s, t, self.width))
            x = tape.add(x, tape.add(tape.einsum("stw,wv->stv", o, blk["proj"]), blk["proj_b"]))
            y = tape.layer_norm(x, blk["ln2_g"], blk["ln2_b"])
            y = tape.leaky_relu(tape.add(tape.einsum("stw,wv->stv", y, blk["fc1"]), blk["fc1_b"]), 0.2)
            x = tape.add(x, tape.add(tape.einsum("stv,vw->stw", y, blk["fc2"]), blk["fc2_b"]))
        x = tape.layer_norm(x, self.head_ln_g, self.head_ln_b)
        return tape.add(tape.einsum("stw,wv->stv", x, self.head), self.head_b)


def predict_articulation(transformer: ArticulationTransformer, patch_feats,
                         phi_k, skeleton: Skeleton, view_rot, view_trans,
                         camera, near: float = 1e-3) -> tuple[Tensor, np.ndarray]:
    """Bone rotations from bone-centroid features; returns (angles, u_b).

    Bone midpoints at rest are posed by the viewpoint only, projected, and
    patch features are bilinearly sampled there (zeros off-image).
    """
    from .render import project

    pf = patch_feats if isinstance(patch_feats, Tensor) else Tensor(np.asarray(patch_feats))
    phi = phi_k if isinstance(phi_k, Tensor) else Tensor(np.asarray(phi_k))
    s = phi.shape[0]
    bm1 = skeleton.n_bones - 1
    mids = skeleton.bone_midpoints.astype(phi.dtype)              # (B-1, 3)
    world = tape.add(tape.einsum("sij,bj->sbi", view_rot, mids),
                     tape.reshape(view_trans, (s, 1, 3)))
    u, v, depth = project(world, camera)
    # off-image policy: behind-camera points get pushed far off the image
    bad = (depth.numpy() <= near) * 1e6
    u = tape.add(u, bad)
    v = tape.add(v, bad)

    sp, hp, wp = pf.shape[0], pf.shape[2], pf.shape[3]
    pf_hwc = tape.transpose(pf, (0, 2, 3, 1))
    scale_u = wp / camera.width
    scale_v = hp / camera.height
    sample_idx = np.repeat(np.arange(s), bm1)
    u_flat = tape.reshape(tape.mul(u, scale_u), (s * bm1,))
    v_flat = tape.reshape(tape.mul(v, scale_v), (s * bm1,))
    local = bilinear_sample_batched(pf_hwc, sample_idx, u_flat, v_flat)

    phi_rep = tape.gather(phi, sample_idx)
    bidx = np.tile((np.arange(bm1) / bm1).astype(phi.dtype), s)[:, None]
    joints = np.tile(skeleton.offsets[1:].astype(phi.dtype), (s, 1))
    cx, cy = camera.center
    u_tok = tape.reshape(tape.mul(tape.sub(u, cx), 2.0 / camera.width), (s * bm1, 1))
    v_tok = tape.reshape(tape.mul(tape.sub(v, cy), 2.0 / camera.height), (s * bm1, 1))
    tokens = tape.concat([phi_rep, local, Tensor(bidx), Tensor(joints), u_tok, v_tok], axis=1)
    tokens = tape.reshape(tokens, (s, bm1, tokens.shape[1]))
    raw = transformer(tokens)
    angles = clamp_rotations(tape.reshape(raw, (s * bm1, 3)), skeleton.leg_mask)
    uv = np.stack([u.numpy(), v.numpy()], axis=-1)
    return tape.reshape(angles, (s, bm1, 3)), uv


class LightingHead:
    """phi_out -> (unit light direction, ambient in (0,1), diffuse in (0.5,1))."""

    def __init__(self, rng: np.random.Generator, feat_dim: int, width: int = 64,
                 depth: int = 5, dtype=np.float64):
        self.mlp = MLP(feat_dim, 4, width, depth, rng, activation="leaky_relu",
                       dtype=dtype)

    def named_params(self):
        return self.mlp.named_params()

    def __call__(self, phi_out):
        x = phi_out if isinstance(phi_out, Tensor) else Tensor(np.asarray(phi_out))
        out = self.mlp(x)                                  # (S, 4)
        az = tape.mul(tape.tanh(out[:, 0]), np.pi)
        el = tape.mul(tape.tanh(out[:, 1]), np.pi / 2)
        ce = tape.cos(el)
        direction = tape.stack([tape.mul(ce, tape.sin(az)), tape.sin(el),
                                tape.mul(ce, tape.cos(az))], axis=-1)
        k_ambient = tape.sigmoid(out[:, 2])
        k_diffuse = tape.add(tape.mul(tape.sigmoid(out[:, 3]), 0.5), 0.5)
        return direction, k_ambient, k_diffuse
