"""Coordinate-MLP neural fields in canonical space.

Template SDF, albedo, canonical feature field and instance deformation,
all fed by an 8-frequency sin/cos positional encoding.  The SDF and the
deformation field mirror their query locations about the yz-plane so the
represented shape is exactly bilaterally symmetric; albedo and the feature
field are left unmirrored.

Sign convention: SDF negative inside.
"""

from __future__ import annotations

import numpy as np

from . import tape
from .geometry import ellipsoid_sdf
from .optim import Adam, ParamStore
from .tape import Tensor

INIT_SEMI_AXES = (0.3, 0.3, 0.6)


class PosEncoding:
    """[sin(2^i pi x), cos(2^i pi x)] for i < num_frequencies, plus raw x."""

    def __init__(self, num_frequencies: int = 8, include_raw: bool = True):
        self.num_frequencies = num_frequencies
        self.include_raw = include_raw
        self.freqs = (2.0 ** np.arange(num_frequencies)) * np.pi

    @property
    def out_dim(self) -> int:
        return 3 * 2 * self.num_frequencies + (3 if self.include_raw else 0)

    def encode(self, x) -> Tensor:
        x = tape.as_tensor(x)
        n = x.shape[0]
        f = self.freqs.astype(x.dtype).reshape(1, -1, 1)
        e = tape.mul(tape.reshape(x, (n, 1, 3)), f)           # (n, F, 3)
        blocks = tape.stack([tape.sin(e), tape.cos(e)], axis=2)  # (n, F, 2, 3)
        enc = tape.reshape(blocks, (n, 6 * self.num_frequencies))
        if self.include_raw:
            enc = tape.concat([enc, x], axis=1)
        return enc

    def encode_with_grad(self, x):
        """Returns (enc, chain) where chain(g_enc) -> d(out)/dx as tape nodes."""
        x = tape.as_tensor(x)
        n = x.shape[0]
        nf = self.num_frequencies
        f = self.freqs.astype(x.dtype).reshape(1, -1, 1)
        e = tape.mul(tape.reshape(x, (n, 1, 3)), f)
        se, ce = tape.sin(e), tape.cos(e)
        blocks = tape.stack([se, ce], axis=2)
        enc = tape.reshape(blocks, (n, 6 * nf))
        if self.include_raw:
            enc = tape.concat([enc, x], axis=1)

        def chain(g_enc: Tensor) -> Tensor:
            if g_enc.shape[0] != n:
                zeros = np.zeros((n, g_enc.shape[1]), dtype=g_enc.dtype)
                g_enc = tape.add(g_enc, Tensor(zeros))
            g_freq = tape.reshape(g_enc[:, : 6 * nf], (n, nf, 2, 3))
            dsin = tape.mul(ce, f)
            dcos = tape.neg(tape.mul(se, f))
            d = tape.stack([dsin, dcos], axis=2)              # (n, F, 2, 3)
            gx = tape.tsum(tape.mul(g_freq, d), axis=(1, 2))  # (n, 3)
            if self.include_raw:
                gx = tape.add(gx, g_enc[:, 6 * nf:])
            return gx

        return enc, chain


def _xavier(rng: np.random.Generator, fan_in: int, fan_out: int, dtype) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out)).astype(dtype)


def _attenuate_freq_rows(w: np.ndarray, num_frequencies: int, decay: float) -> None:
    """Scale first-layer rows fed by encoding block i with decay**i.

    Starts coordinate MLPs smooth; without this the high-frequency
    sin/cos columns dominate the initial function and regression stalls.
    """
    scale = np.ones(w.shape[0], dtype=w.dtype)
    for i in range(num_frequencies):
        scale[i * 6:(i + 1) * 6] = decay ** i
    w *= scale[:, None]


class MLP:
    """Plain fully-connected stack; depth counts the linear layers."""

    def __init__(self, in_dim: int, out_dim: int, width: int, depth: int,
                 rng: np.random.Generator, activation: str = "tanh",
                 zero_init_last: bool = False, dtype=np.float64):
        assert depth >= 1
        self.activation = activation
        self.weights: list[Tensor] = []
        self.biases: list[Tensor] = []
        dims = [in_dim] + [width] * (depth - 1) + [out_dim]
        for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
            last = i == depth - 1
            w = np.zeros((a, b), dtype=dtype) if (zero_init_last and last) else _xavier(rng, a, b, dtype)
            self.weights.append(Tensor(w))
            self.biases.append(Tensor(np.zeros(b, dtype=dtype)))

    def named_params(self):
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            yield f"w{i}", w
            yield f"b{i}", b

    def _act(self, z: Tensor) -> Tensor:
        if self.activation == "tanh":
            return tape.tanh(z)
        if self.activation == "leaky_relu":
            return tape.leaky_relu(z, 0.2)
        if self.activation == "relu":
            return tape.relu(z)
        raise ValueError(self.activation)

    def __call__(self, x: Tensor) -> Tensor:
        h = x
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = tape.add(tape.matmul(h, w), b)
            if i != last:
                h = self._act(h)
        return h

    def forward_with_input_grad(self, x: Tensor):
        """Scalar-output forward plus d(out)/d(input), both on the tape.

        The input gradient is assembled from the layer weights and
        activation derivatives, so its own gradient w.r.t. the parameters
        is available through ordinary first-order backprop.
        """
        if self.weights[-1].shape[1] != 1:
            raise ValueError("input-grad path requires scalar output")
        if self.activation != "tanh":
            raise ValueError("input-grad path implemented for tanh only")
        h = x
        acts: list[Tensor] = []
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = tape.add(tape.matmul(h, w), b)
            if i != last:
                h = tape.tanh(z)
                acts.append(h)
            else:
                out = z
        g = tape.transpose(self.weights[last])               # (1, width)
        for i in range(last - 1, -1, -1):
            a = acts[i]
            d = tape.sub(1.0, tape.mul(a, a))                # tanh'
            g = tape.matmul(tape.mul(g, d), tape.transpose(self.weights[i]))
        return out, g                                        # (n,1), (n,in_dim)


def _mirror_x(x):
    """(|x|, y, z) query substitution; returns (mirrored, sign_x)."""
    xv = x.data if isinstance(x, Tensor) else np.asarray(x)
    sign = np.sign(xv[:, 0:1])
    if isinstance(x, Tensor) and x.requires_grad:
        m = tape.concat([tape.tabs(x[:, 0:1]), x[:, 1:]], axis=1)
    else:
        m = Tensor(np.concatenate([np.abs(xv[:, 0:1]), xv[:, 1:]], axis=1))
    return m, sign


class SdfField:
    """Template signed distance field s(x), negative inside."""

    def __init__(self, rng: np.random.Generator, width: int = 64, depth: int = 5,
                 symmetric: bool = True, dtype=np.float64, freq_init_decay: float = 0.5):
        self.encoding = PosEncoding()
        self.symmetric = symmetric
        self.mlp = MLP(self.encoding.out_dim, 1, width, depth, rng, dtype=dtype)
        _attenuate_freq_rows(self.mlp.weights[0].data, self.encoding.num_frequencies,
                             freq_init_decay)
        self.query_count = 0

    def named_params(self):
        return self.mlp.named_params()

    def __call__(self, x) -> Tensor:
        x = tape.as_tensor(x)
        self.query_count += x.shape[0]
        if self.symmetric:
            x, _ = _mirror_x(x)
        return tape.reshape(self.mlp(self.encoding.encode(x)), (x.shape[0],))

    def with_grad(self, x):
        """(s, grad_s) with grad_s usable inside further losses."""
        x = tape.as_tensor(x)
        self.query_count += x.shape[0]
        if self.symmetric:
            xq, sign = _mirror_x(x)
        else:
            xq, sign = x, None
        enc, chain = self.encoding.encode_with_grad(xq)
        s, g_enc = self.mlp.forward_with_input_grad(enc)
        gx = chain(g_enc)
        if sign is not None:
            gx = tape.concat([tape.mul(gx[:, 0:1], sign), gx[:, 1:]], axis=1)
        return tape.reshape(s, (x.shape[0],)), gx


class AlbedoField:
    """RGB albedo in canonical space, conditioned on a per-image code."""

    def __init__(self, rng: np.random.Generator, cond_dim: int, width: int = 64,
                 depth: int = 8, cond_proj: int = 32, dtype=np.float64):
        self.encoding = PosEncoding()
        self.proj = Tensor(_xavier(rng, cond_dim, cond_proj, dtype))
        self.mlp = MLP(self.encoding.out_dim + cond_proj, 3, width, depth, rng, dtype=dtype)
        self.query_count = 0

    def named_params(self):
        yield "proj", self.proj
        yield from self.mlp.named_params()

    def __call__(self, x, cond) -> Tensor:
        """x: (n, 3) canonical points; cond: (n, D) or (D,) image code."""
        x = tape.as_tensor(x)
        self.query_count += x.shape[0]
        cond = tape.as_tensor(cond)
        if cond.ndim == 1:
            cond = tape.reshape(cond, (1, cond.shape[0]))
        c = tape.matmul(cond, self.proj)
        if c.shape[0] == 1 and x.shape[0] != 1:
            c = tape.add(tape.Tensor(np.zeros((x.shape[0], c.shape[1]), dtype=x.dtype)), c)
        h = tape.concat([self.encoding.encode(x), c], axis=1)
        return tape.sigmoid(self.mlp(h))


class FeatureField:
    """Instance-independent canonical feature field (16 channels)."""

    def __init__(self, rng: np.random.Generator, out_dim: int = 16, width: int = 64,
                 depth: int = 5, dtype=np.float64):
        self.encoding = PosEncoding()
        self.out_dim = out_dim
        self.mlp = MLP(self.encoding.out_dim, out_dim, width, depth, rng, dtype=dtype)
        self.query_count = 0

    def named_params(self):
        return self.mlp.named_params()

    def __call__(self, x) -> Tensor:
        x = tape.as_tensor(x)
        self.query_count += x.shape[0]
        return self.mlp(self.encoding.encode(x))


class DeformField:
    """Instance displacement of template vertices, mirrored like the SDF.

    The output layer starts at zero so training begins from the pure
    template.
    """

    def __init__(self, rng: np.random.Generator, cond_dim: int, width: int = 64,
                 depth: int = 8, cond_proj: int = 32, symmetric: bool = True,
                 dtype=np.float64):
        self.encoding = PosEncoding()
        self.symmetric = symmetric
        self.proj = Tensor(_xavier(rng, cond_dim, cond_proj, dtype))
        self.mlp = MLP(self.encoding.out_dim + cond_proj, 3, width, depth, rng,
                       zero_init_last=True, dtype=dtype)
        self.query_count = 0

    def named_params(self):
        yield "proj", self.proj
        yield from self.mlp.named_params()

    def __call__(self, x, cond) -> Tensor:
        x = tape.as_tensor(x)
        self.query_count += x.shape[0]
        cond = tape.as_tensor(cond)
        if cond.ndim == 1:
            cond = tape.reshape(cond, (1, cond.shape[0]))
        if self.symmetric:
            xq, sign = _mirror_x(x)
        else:
            xq, sign = x, None
        c = tape.matmul(cond, self.proj)
        if c.shape[0] == 1 and x.shape[0] != 1:
            c = tape.add(tape.Tensor(np.zeros((x.shape[0], c.shape[1]), dtype=x.dtype)), c)
        h = tape.concat([self.encoding.encode(xq), c], axis=1)
        dv = self.mlp(h)
        if sign is not None:
            dv = tape.concat([tape.mul(dv[:, 0:1], sign), dv[:, 1:]], axis=1)
        return dv


class FitError(RuntimeError):
    """Pre-fit regression did not reach the required residual."""


def _prefit_samples(rng: np.random.Generator, n: int, semi_axes) -> np.ndarray:
    """Sampling mix for the ellipsoid regression.

    Plain uniform sampling leaves the worst residuals at the cube faces,
    the x=0 mirror wall and the interior medial axis, so those regions get
    dedicated components.
    """
    ax = np.asarray(semi_axes)
    n1 = int(n * 0.40)
    n2 = int(n * 0.15)
    n3 = int(n * 0.20)
    n4 = int(n * 0.15)
    n5 = n - n1 - n2 - n3 - n4
    cube = rng.uniform(-1.15, 1.15, size=(n1, 3))
    box = rng.uniform(-1.0, 1.0, size=(n2, 3)) * (ax[None, :] * 1.3)
    th = np.arccos(rng.uniform(-1, 1, size=n3))
    ph = rng.uniform(0, 2 * np.pi, size=n3)
    surf = np.stack([ax[0] * np.sin(th) * np.cos(ph),
                     ax[1] * np.sin(th) * np.sin(ph),
                     ax[2] * np.cos(th)], -1)
    near_surf = surf + rng.normal(scale=0.06, size=(n3, 3))
    plane = rng.uniform(-1.15, 1.15, size=(n4, 3))
    plane[:, 0] = rng.normal(scale=0.06, size=n4)
    axis = np.stack([rng.normal(scale=0.07, size=n5),
                     rng.normal(scale=0.07, size=n5),
                     rng.uniform(-0.8, 0.8, size=n5)], -1)
    return np.concatenate([cube, box, near_surf, plane, axis], 0)


def init_sdf_ellipsoid(field: SdfField, rng: np.random.Generator,
                       semi_axes=INIT_SEMI_AXES, steps: int = 5000,
                       batch: int = 1024, residual_threshold: float = 0.02,
                       lr_start: float = 3e-3, lr_end: float = 1e-5) -> dict:
    """Pre-fit the SDF MLP by regression to the exact ellipsoid SDF.

    Raises FitError when the max residual over 10k fresh uniform samples
    exceeds the threshold.
    """
    store = ParamStore()
    store.register_all("sdf", field.named_params(), group="prior")
    opt = Adam(store, group_lr={"prior": lr_start, "other": lr_start})
    dtype = field.mlp.weights[0].dtype
    for i in range(steps):
        opt.group_lr["prior"] = lr_start * (lr_end / lr_start) ** (i / steps)
        pts = _prefit_samples(rng, batch, semi_axes).astype(dtype)
        target = ellipsoid_sdf(pts, semi_axes).astype(dtype)
        err = tape.sub(field(Tensor(pts)), Tensor(target))
        loss = tape.tmean(tape.mul(err, err))
        store.zero_grad()
        tape.backward(loss)
        opt.step()

    probe = rng.uniform(-1.0, 1.0, size=(10000, 3)).astype(dtype)
    fit = field(Tensor(probe)).numpy()
    exact = ellipsoid_sdf(probe, semi_axes)
    resid = np.abs(fit - exact)
    report = {"max_residual": float(resid.max()), "mean_residual": float(resid.mean())}
    if report["max_residual"] > residual_threshold:
        raise FitError(f"ellipsoid pre-fit residual {report['max_residual']:.4f} "
                       f"> {residual_threshold}")
    return report
