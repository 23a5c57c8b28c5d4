"""A small Fourier neural operator on uniform grids (d = 1 or 2) with a
hand-written reverse pass.

Parameters live in one flat float64 vector. Complex spectral weights are stored
as separate real and imaginary blocks. Kept frequencies are ``-k..k`` on every
axis but the last, and ``0..k`` on the last (half-spectrum) axis, independent of
grid resolution.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from functools import lru_cache

import numpy as np
from scipy.special import erfc

_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


@dataclass(frozen=True)
class ModelConfig:
    width: int = 16
    modes: int = 8
    layers: int = 3
    dim: int = 2
    activation: str = "gelu"
    input_channels: int = 1
    output_channels: int = 1
    # fixed affine maps: network sees (a - input_shift) / input_scale and
    # its raw output is multiplied by output_scale
    input_shift: float = 0.0
    input_scale: float = 1.0
    output_scale: float = 1.0
    relative_loss: bool = False

    def __post_init__(self):
        if self.modes < 1 or self.width < 1 or self.layers < 1:
            raise ValueError("width, modes and layers must be positive")
        if self.dim not in (1, 2):
            raise ValueError("only 1D and 2D grids are supported")
        if self.activation not in ("gelu", "identity"):
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.input_channels != 1 or self.output_channels != 1:
            raise ValueError("scalar input and output fields only")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> ModelConfig:
        return cls(**d)


class ResolutionError(ValueError):
    pass


def _erf_extended(x):
    """erf in long double: ``2/sqrt(pi) exp(-x^2) sum_n 2^n x^(2n+1) / (2n+1)!!``.

    All series terms are positive, so there is no cancellation; beyond |x| = 6.5
    erf equals +-1 to long double precision.
    """
    x = np.asarray(x, dtype=np.longdouble)
    z = np.clip(np.abs(x), 0, 6.5)
    term = z.copy()
    total = z.copy()
    z2 = z * z
    for n in range(1, 200):
        term = term * 2 * z2 / (2 * n + 1)
        total += term
        if np.all(term <= total * np.finfo(np.longdouble).eps):
            break
    two_over_sqrt_pi = np.longdouble(2) / np.sqrt(np.longdouble(np.pi))
    val = np.where(np.abs(x) >= 6.5, 1, two_over_sqrt_pi * np.exp(-z2) * total)
    return np.sign(x) * val


def gelu(x):
    return x * _normal_cdf(x)


def _normal_cdf(x):
    x = np.asarray(x)
    if x.dtype == np.longdouble:
        return 0.5 * (1 + _erf_extended(x / np.sqrt(np.longdouble(2))))
    # erfc avoids cancellation in 1 + erf for negative x
    return 0.5 * erfc(-x / _SQRT2)


def gelu_prime(x, cdf=None):
    cdf = _normal_cdf(x) if cdf is None else cdf
    return cdf + x * _INV_SQRT_2PI * np.exp(-0.5 * x * x)


@dataclass(frozen=True)
class Block:
    name: str
    shape: tuple
    start: int

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))

    @property
    def slice(self) -> slice:
        return slice(self.start, self.start + self.size)


def build_layout(cfg: ModelConfig) -> list[Block]:
    W = cfg.width
    n_modes = (2 * cfg.modes + 1) ** (cfg.dim - 1) * (cfg.modes + 1)
    shapes = [("lift.w", (W, cfg.input_channels + cfg.dim)), ("lift.b", (W,))]
    for t in range(cfg.layers):
        shapes += [
            (f"spec{t}.re", (W, W, n_modes)),
            (f"spec{t}.im", (W, W, n_modes)),
            (f"point{t}.w", (W, W)),
            (f"point{t}.b", (W,)),
        ]
    shapes += [("proj.w", (cfg.output_channels, W)), ("proj.b", (cfg.output_channels,))]
    layout, start = [], 0
    for name, shape in shapes:
        block = Block(name, shape, start)
        layout.append(block)
        start += block.size
    return layout


def param_count(cfg: ModelConfig) -> int:
    W, k, d = cfg.width, cfg.modes, cfg.dim
    n_modes = (2 * k + 1) ** (d - 1) * (k + 1)
    lift = W * (1 + d) + W
    layer = 2 * W * W * n_modes + W * W + W
    return lift + cfg.layers * layer + W + 1


@lru_cache(maxsize=64)
def _mode_index(R: int, k: int, dim: int):
    """Positions of the kept modes inside an ``rfftn`` output of R points per side."""
    if 2 * k + 1 > R:
        raise ResolutionError(f"{k} modes per axis need at least {2 * k + 1} points, got R={R}")
    last = np.arange(k + 1)
    if dim == 1:
        return (last,)
    rows = np.concatenate([np.arange(k + 1), np.arange(R - k, R)])
    return (rows[:, None], last[None, :])


@lru_cache(maxsize=64)
def _half_weight(k: int, dim: int) -> np.ndarray:
    # 1 on the zero frequency of the half-spectrum axis, 2 elsewhere
    c = np.full(k + 1, 2.0)
    c[0] = 1.0
    if dim == 1:
        return c
    return np.broadcast_to(c, (2 * k + 1, k + 1)).ravel().copy()


@lru_cache(maxsize=64)
def _dft_matrices(R: int, k: int, dim: int):
    """Truncated DFT factors for the kept modes, laid out for large 2D matmuls.

    The matmul form is equivalent to slicing ``rfftn`` but much cheaper when
    k << R.
    """
    x = np.arange(R)
    fwd_last = np.exp(-2j * np.pi * np.outer(x, np.arange(k + 1)) / R)
    out = {
        # (R, 2(k+1)): real then imaginary part of exp(-2 pi i q l / R)
        "last": np.concatenate([fwd_last.real, fwd_last.imag], axis=1),
        # (2(k+1), R): maps [Re U | Im U] to Re(U exp(+2 pi i l q / R))
        "inv_last": np.concatenate([fwd_last.real.T, fwd_last.imag.T], axis=0),
    }
    if dim == 2:
        rows = _mode_index(R, k, 2)[0].ravel()
        fwd_rows = np.exp(-2j * np.pi * np.outer(rows, x) / R)
        out["rows"] = fwd_rows
        out["inv_rows"] = np.ascontiguousarray(fwd_rows.conj().T)
    return out


def _matrices_for(R, k, dim, dtype):
    F = _dft_matrices(R, k, dim)
    if dtype in (np.longdouble, np.clongdouble):
        F = {key: val.astype(np.clongdouble if np.iscomplexobj(val) else np.longdouble)
             for key, val in F.items()}
    return F


def _truncated_dft(v: np.ndarray, R: int, k: int, dim: int) -> np.ndarray:
    """Kept modes of ``rfftn(v)`` for v of shape (B, W, R**dim); returns (B, W, M)."""
    F = _matrices_for(R, k, dim, v.dtype)
    B, W = v.shape[:2]
    K = k + 1
    h = v.reshape(-1, R) @ F["last"]
    half = h[:, :K] + 1j * h[:, K:]
    if dim == 1:
        return half.reshape(B, W, K)
    # contract the remaining spatial axis: (2k+1, R) @ (R, BW*K)
    hT = half.reshape(B * W, R, K).transpose(1, 0, 2).reshape(R, -1)
    Z = (F["rows"] @ hT).reshape(2 * k + 1, B * W, K).transpose(1, 0, 2)
    return Z.reshape(B, W, -1)


def _weighted_idft_real(Y: np.ndarray, weight: np.ndarray | None, R: int, k: int, dim: int) -> np.ndarray:
    """``Re(sum_modes weight * Y * exp(+2 pi i k.x / R))`` on the grid, shape (B, W, R**dim)."""
    F = _matrices_for(R, k, dim, Y.dtype)
    B, W = Y.shape[:2]
    K = k + 1
    if weight is not None:
        Y = Y * weight
    if dim == 1:
        U = Y.reshape(-1, K)
        return (np.concatenate([U.real, U.imag], axis=1) @ F["inv_last"]).reshape(B, W, R)
    YT = Y.reshape(B * W, 2 * k + 1, K).transpose(1, 0, 2).reshape(2 * k + 1, -1)
    U = (F["inv_rows"] @ YT).reshape(R * B * W, K)
    out = np.concatenate([U.real, U.imag], axis=1) @ F["inv_last"]
    return out.reshape(R, B * W, R).transpose(1, 0, 2).reshape(B, W, -1)


def _coords(R: int, dim: int) -> np.ndarray:
    x = np.linspace(0.0, 1.0, R)
    if dim == 1:
        return x[None, :]
    X, Y = np.meshgrid(x, x, indexing="ij")
    return np.stack([X.ravel(), Y.ravel()])


class SpectralOperator:
    """Lifting, ``layers`` Fourier layers and a pointwise projection.

    Layer t maps ``v -> act(W_t v + b_t + irfft(R_t * rfft(v)[kept]))``; the last
    Fourier layer is linear.
    """

    def __init__(self, config: ModelConfig):
        self.config = config
        self.layout = build_layout(config)
        self.blocks = {b.name: b for b in self.layout}
        self.n_params = sum(b.size for b in self.layout)

    # -- parameters -------------------------------------------------------

    def unpack(self, theta: np.ndarray) -> dict[str, np.ndarray]:
        theta = np.asarray(theta)
        if theta.shape != (self.n_params,):
            raise ValueError(f"expected {self.n_params} parameters, got {theta.shape}")
        return {b.name: theta[b.slice].reshape(b.shape) for b in self.layout}

    def init_params(self, seed: int) -> np.ndarray:
        cfg = self.config
        rng = np.random.default_rng(seed)
        theta = np.empty(self.n_params)
        spec_scale = 1.0 / cfg.width**2
        for b in self.layout:
            kind = b.name.split(".")[0]
            if kind.startswith("spec"):
                vals = spec_scale * rng.random(b.size)
            else:
                fan_in = {"lift": cfg.input_channels + cfg.dim, "proj": cfg.width}.get(kind, cfg.width)
                bound = 1.0 / math.sqrt(fan_in)
                vals = rng.uniform(-bound, bound, b.size)
            theta[b.slice] = vals
        return theta

    # -- evaluation -------------------------------------------------------

    def _check_input(self, a: np.ndarray) -> np.ndarray:
        a = np.asarray(a, dtype=np.float64)
        d = self.config.dim
        if a.ndim == d:
            a = a[None]
        if a.ndim != d + 1 or any(s != a.shape[1] for s in a.shape[1:]):
            raise ResolutionError(f"expected a batch of {d}D square grids, got {a.shape}")
        _mode_index(a.shape[1], self.config.modes, d)
        return a

    def _spectral(self, v, wr, wi, R, store=None):
        cfg = self.config
        k, d = cfg.modes, cfg.dim
        Z = _truncated_dft(v, R, k, d)
        if store is not None:
            store.append(Z)
        # Y[b, o, m] = sum_i W[i, o, m] Z[b, i, m]
        Y = np.einsum("bim,iom->bom", Z, wr + 1j * wi)
        return _weighted_idft_real(Y, _half_weight(k, d), R, k, d) / R**d

    def _spectral_adjoint(self, g, Z, wr, wi, R):
        """Return (grad wrt layer input, grad re, grad im) for upstream ``g``."""
        cfg = self.config
        k, d = cfg.modes, cfg.dim
        # adjoint of the real inverse transform: conjugate (forward) transform
        GY = _truncated_dft(g, R, k, d) * (_half_weight(k, d) / R**d)
        gW = np.einsum("bom,bim->iom", GY, Z.conj())
        GZ = np.einsum("bom,iom->bim", GY, wr - 1j * wi)
        gv = _weighted_idft_real(GZ, None, R, k, d)
        return gv, gW.real, gW.imag

    def _forward(self, p, a, keep=False):
        cfg = self.config
        B, R = a.shape[0], a.shape[1]
        N = R**cfg.dim
        x = (a.reshape(B, 1, N) - cfg.input_shift) / cfg.input_scale
        coords = np.broadcast_to(_coords(R, cfg.dim).astype(a.dtype), (B, cfg.dim, N))
        x = np.concatenate([x, coords], axis=1)
        tape = {"x": x, "v": [], "s": [], "Z": [], "cdf": {}}
        v = p["lift.w"] @ x + p["lift.b"][:, None]
        for t in range(cfg.layers):
            tape["v"].append(v)
            s = (
                p[f"point{t}.w"] @ v
                + p[f"point{t}.b"][:, None]
                + self._spectral(v, p[f"spec{t}.re"], p[f"spec{t}.im"], R, tape["Z"])
            )
            last = t == cfg.layers - 1
            tape["s"].append(s)
            if last or cfg.activation == "identity":
                v = s
            else:
                cdf = _normal_cdf(s)
                tape["cdf"][t] = cdf
                v = s * cdf
        tape["v"].append(v)
        out = (p["proj.w"] @ v + p["proj.b"][:, None])[:, 0, :] * cfg.output_scale
        out = out.reshape(a.shape)
        return (out, tape) if keep else out

    def forward(self, theta: np.ndarray, a: np.ndarray) -> np.ndarray:
        """Evaluate on one field ``(R,)*d`` or a batch ``(B,) + (R,)*d``."""
        arr = np.asarray(a)
        batched = arr.ndim == self.config.dim + 1
        out = self._forward(self.unpack(theta), self._check_input(arr))
        return out if batched else out[0]

    def features(self, theta: np.ndarray, a: np.ndarray) -> np.ndarray:
        """Hidden state entering the projection, shape ``(B, width, R**d)``."""
        _, tape = self._forward(self.unpack(theta), self._check_input(a), keep=True)
        return tape["v"][-1]

    def sample_losses(self, theta, a, u, extended: bool = False) -> np.ndarray:
        """Loss of every sample in the batch.

        ``extended=True`` evaluates in long double (used by finite-difference
        checks to push round-off far below the truncation error).
        """
        a = self._check_input(a)
        u = np.asarray(u, dtype=np.float64).reshape(a.shape)
        p = self.unpack(theta)
        if extended:
            p = {k: v.astype(np.longdouble) for k, v in p.items()}
            a = a.astype(np.longdouble)
            u = u.astype(np.longdouble)
        return self._losses(self._forward(p, a), u, a.shape[1])

    def _losses(self, out, u, R):
        d = self.config.dim
        h_d = (1 / out.dtype.type(R - 1)) ** d
        axes = tuple(range(1, d + 1))
        sq = h_d * np.sum((out - u) ** 2, axis=axes)
        if self.config.relative_loss:
            sq = sq / (h_d * np.sum(u**2, axis=axes))
        return sq

    def loss(self, theta, a, u) -> float:
        if np.shape(a) != np.shape(u):
            raise ResolutionError("input and target resolutions differ")
        return float(self.sample_losses(theta, a, u)[0]) if np.ndim(a) == self.config.dim \
            else float(np.mean(self.sample_losses(theta, a, u)))

    def weighted_loss_grad(self, theta, a, u, weights):
        """Per-sample losses and the gradient of ``sum_j weights[j] * loss_j``."""
        cfg = self.config
        p = self.unpack(theta)
        a = self._check_input(a)
        u = np.asarray(u, dtype=np.float64)
        if u.shape != a.shape:
            raise ResolutionError(f"target shape {u.shape} differs from input {a.shape}")
        weights = np.asarray(weights, dtype=np.float64)
        B, R = a.shape[0], a.shape[1]
        N = R**cfg.dim
        out, tape = self._forward(p, a, keep=True)
        losses = self._losses(out, u, R)

        h_d = (1.0 / (R - 1)) ** cfg.dim
        scale = 2.0 * h_d * weights
        if cfg.relative_loss:
            scale = scale / (h_d * np.sum(u.reshape(B, N) ** 2, axis=1))
        g_out = ((out - u).reshape(B, N) * scale[:, None] * cfg.output_scale)[:, None, :]

        grads = {}
        vL = tape["v"][-1]
        grads["proj.w"] = np.einsum("bon,bwn->ow", g_out, vL)
        grads["proj.b"] = g_out.sum(axis=(0, 2))
        gv = p["proj.w"].T @ g_out
        for t in reversed(range(cfg.layers)):
            s = tape["s"][t]
            last = t == cfg.layers - 1
            gs = gv if (last or cfg.activation == "identity") else gv * gelu_prime(s, tape["cdf"][t])
            v = tape["v"][t]
            grads[f"point{t}.w"] = np.einsum("bon,bin->oi", gs, v)
            grads[f"point{t}.b"] = gs.sum(axis=(0, 2))
            gspec, grads[f"spec{t}.re"], grads[f"spec{t}.im"] = self._spectral_adjoint(
                gs, tape["Z"][t], p[f"spec{t}.re"], p[f"spec{t}.im"], R
            )
            gv = p[f"point{t}.w"].T @ gs + gspec
        grads["lift.w"] = np.einsum("bon,bin->oi", gv, tape["x"])
        grads["lift.b"] = gv.sum(axis=(0, 2))

        flat = np.empty(self.n_params)
        for b in self.layout:
            flat[b.slice] = grads[b.name].ravel()
        return losses, flat

    def grad(self, theta, a, u) -> np.ndarray:
        """Gradient of the mean loss over a batch at one resolution."""
        a = self._check_input(a)
        if len(a) == 0:
            raise ValueError("empty batch")
        B = a.shape[0]
        return self.weighted_loss_grad(theta, a, np.asarray(u).reshape(a.shape), np.full(B, 1.0 / B))[1]

    def hermitian_residue(self, theta, a) -> tuple[float, float]:
        """Check the real-FFT layout of every Fourier layer.

        The kept half spectrum is completed to a two-sided Hermitian spectrum and
        inverted with a complex FFT. Returns ``(max |imag|, max |real - layer output|)``.
        """
        cfg = self.config
        p = self.unpack(theta)
        a = self._check_input(a)
        _, tape = self._forward(p, a, keep=True)
        R = a.shape[1]
        spatial = (R,) * cfg.dim
        axes = tuple(range(2, 2 + cfg.dim))
        idx = _mode_index(R, cfg.modes, cfg.dim)
        sel = (slice(None), slice(None)) + idx
        neg = (slice(None), slice(None)) + tuple((-ix) % R for ix in idx)
        share = np.where(np.broadcast_to(idx[-1], np.broadcast_shapes(*(np.shape(i) for i in idx))) == 0, 0.5, 1.0)
        imag = mismatch = 0.0
        for t in range(cfg.layers):
            v = tape["v"][t]
            B, W = v.shape[:2]
            X = np.fft.fftn(v.reshape((B, W) + spatial), axes=axes)
            Wc = p[f"spec{t}.re"] + 1j * p[f"spec{t}.im"]
            Y = np.einsum("bim,iom->bom", X[sel].reshape(B, W, -1), Wc)
            Y = Y.reshape((B, W) + share.shape) * share
            H = np.zeros_like(X)
            H[sel] += Y
            H[neg] += np.conj(Y)
            full = np.fft.ifftn(H, axes=axes).reshape(B, W, -1)
            ref = self._spectral(v, p[f"spec{t}.re"], p[f"spec{t}.im"], R)
            imag = max(imag, float(np.max(np.abs(full.imag))))
            mismatch = max(mismatch, float(np.max(np.abs(full.real - ref))))
        return imag, mismatch
