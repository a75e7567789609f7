"""Downsampling operator A, its fitted pseudoinverse A+, and the affine projection.

Two representations are supported:

* ``matrix`` mode stores A as an explicit (d_LR, d_HR) matrix. Inputs are
  ``(N, d_HR)`` arrays. Used for the 2D toy problem where A = [0.5, 0.5].
* ``conv`` mode is a channelwise strided correlation with a unit-sum kernel on
  ``(N, C, H, W)`` images. Borders wrap around (circular padding), which keeps
  A shift-invariant so that a sub-pixel up-convolution can invert it exactly.

The pseudoinverse in conv mode is a bank of ``stride**2`` small kernels applied
on the LR grid followed by a pixel shuffle.
"""
from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np

from .nn_core import conv2d, conv2d_backward, pad2d, pad2d_adjoint, pixel_shuffle, pixel_unshuffle
from .persist import load_bundle, save_bundle


def gaussian_kernel(size=9, sigma=1.5):
    a = np.arange(size) - (size - 1) / 2
    g = np.exp(-a ** 2 / (2 * sigma ** 2))
    k = np.outer(g, g)
    return k / k.sum()


@dataclass
class DownsampleOperator:
    mode: str
    stride: int = 1
    in_shape: tuple = ()
    channels: int = 1
    kernel: np.ndarray | None = None
    matrix: np.ndarray | None = None
    sigma_blur: float | None = None

    def __post_init__(self):
        if self.mode not in ("conv", "matrix"):
            raise ValueError(f"mode must be 'conv' or 'matrix', got {self.mode!r}")
        if self.mode == "matrix":
            self.matrix = np.atleast_2d(np.asarray(self.matrix, dtype=np.float64))
            if not np.all(np.isfinite(self.matrix)):
                raise ValueError("operator matrix has non-finite entries")
            if np.max(np.abs(self.matrix.sum(axis=1) - 1.0)) > 1e-12:
                raise ValueError("operator rows must sum to 1")
            self.in_shape = (self.matrix.shape[1],)
            return
        self.kernel = np.asarray(self.kernel, dtype=np.float64)
        if self.kernel.ndim != 2 or self.kernel.shape[0] != self.kernel.shape[1]:
            raise ValueError(f"kernel must be square, got shape {self.kernel.shape}")
        if not np.all(np.isfinite(self.kernel)):
            raise ValueError("kernel has non-finite entries")
        if abs(self.kernel.sum() - 1.0) > 1e-12:
            raise ValueError(f"kernel must sum to 1, sums to {self.kernel.sum()!r}")
        if self.stride < 1 or self.channels < 1:
            raise ValueError("stride and channels must be positive")
        self.in_shape = tuple(int(v) for v in self.in_shape)
        if len(self.in_shape) != 2 or any(v % self.stride for v in self.in_shape):
            raise ValueError(f"in_shape {self.in_shape} must be 2D and divisible by stride {self.stride}")
        if self.pad[0] > min(self.in_shape) or self.pad[1] > min(self.in_shape):
            raise ValueError("image too small for the kernel footprint")

    @property
    def out_shape(self):
        if self.mode == "matrix":
            return (self.matrix.shape[0],)
        return tuple(v // self.stride for v in self.in_shape)

    @property
    def pad(self):
        k = self.kernel.shape[0]
        lo = max((k - self.stride) // 2, 0)
        return lo, max(k - self.stride - lo, 0)

    def hr_shape(self):
        return self.in_shape if self.mode == "matrix" else (self.channels,) + self.in_shape

    def lr_shape(self):
        return self.out_shape if self.mode == "matrix" else (self.channels,) + self.out_shape

    def to_meta(self):
        meta = {"mode": self.mode, "stride": self.stride, "in_shape": list(self.in_shape),
                "channels": self.channels, "sigma_blur": self.sigma_blur}
        if self.mode == "conv":
            meta["kernel_size"] = self.kernel.shape[0]
        return meta


def gaussian_downsample(in_shape, stride=4, size=9, sigma=1.5, channels=1):
    return DownsampleOperator("conv", stride, tuple(in_shape), channels, gaussian_kernel(size, sigma), sigma_blur=sigma)


def toy_average():
    """x = (y1 + y2) / 2."""
    return DownsampleOperator("matrix", matrix=np.array([[0.5, 0.5]]))


def identity_downsample(in_shape, channels=1):
    return DownsampleOperator("conv", 1, tuple(in_shape), channels, np.ones((1, 1)))


def _check(arr, expected, what):
    if tuple(arr.shape[1:]) != tuple(expected):
        raise ValueError(f"{what}: expected per-sample shape {tuple(expected)}, got {tuple(arr.shape[1:])}")


def apply_downsample(op: DownsampleOperator, y):
    """x = A y for a batch of HR samples."""
    y = np.asarray(y)
    _check(y, op.hr_shape(), "apply_downsample")
    if op.mode == "matrix":
        return y @ op.matrix.T
    n, c, h, w = y.shape
    x = _strided_corr(y.reshape(n * c, h, w), op.kernel, op.stride, op.pad)
    return x.reshape(n, c, *op.out_shape)


def apply_downsample_adjoint(op: DownsampleOperator, x):
    """A^T x."""
    x = np.asarray(x)
    _check(x, op.lr_shape(), "apply_downsample_adjoint")
    if op.mode == "matrix":
        return x @ op.matrix
    n, c = x.shape[:2]
    y = _strided_corr_adjoint(x.reshape(n * c, *op.out_shape), op.kernel, op.stride, op.pad, op.in_shape)
    return y.reshape(n, c, *op.in_shape)


def _strided_corr(y, kernel, s, pad):
    yp = pad2d(y, pad[0], pad[1], "circular")
    k = kernel.shape[0]
    ho, wo = y.shape[-2] // s, y.shape[-1] // s
    out = np.zeros(y.shape[:-2] + (ho, wo), dtype=y.dtype)
    for a in range(k):
        for b in range(k):
            out += kernel[a, b] * yp[..., a:a + s * ho:s, b:b + s * wo:s]
    return out


def _strided_corr_adjoint(x, kernel, s, pad, shape):
    k = kernel.shape[0]
    ho, wo = x.shape[-2:]
    gp = np.zeros(x.shape[:-2] + (shape[0] + pad[0] + pad[1], shape[1] + pad[0] + pad[1]), dtype=x.dtype)
    for a in range(k):
        for b in range(k):
            gp[..., a:a + s * ho:s, b:b + s * wo:s] += kernel[a, b] * x
    return pad2d_adjoint(gp, pad[0], pad[1], "circular", shape)


# ---------------------------------------------------------------------------
# pseudoinverse
# ---------------------------------------------------------------------------

@dataclass
class PinvFitConfig:
    sample_count: int = 32
    iterations: int = 3000
    lr: float = 1e-3
    momentum: float = 0.9
    kernel_size: int = 5
    eval_samples: int = 256
    init: str = "adjoint"
    seed: int = 0

    def __post_init__(self):
        if self.sample_count < 1 or self.iterations < 0:
            raise ValueError("sample_count must be >= 1 and iterations >= 0")
        if self.kernel_size % 2 != 1:
            raise ValueError("kernel_size must be odd")
        if self.init not in ("adjoint", "zeros"):
            raise ValueError(f"unknown init {self.init!r}")


@dataclass
class PseudoInverseOperator:
    mode: str
    stride: int = 1
    lr_shape: tuple = ()
    channels: int = 1
    kernel_bank: np.ndarray | None = None
    matrix: np.ndarray | None = None
    fit_loss: float = float("nan")
    fit_config: dict = field(default_factory=dict)

    def to_meta(self):
        return {"mode": self.mode, "stride": self.stride, "lr_shape": list(self.lr_shape),
                "channels": self.channels, "fit_loss": self.fit_loss, "fit_config": self.fit_config}


def _bank_weight(bank, dtype):
    return bank.astype(dtype, copy=False)[:, None]


def apply_pinv(pinv: PseudoInverseOperator, x):
    """A+ x."""
    x = np.asarray(x)
    if pinv.mode == "matrix":
        return x @ pinv.matrix.T
    n, c, h, w = x.shape
    kb = pinv.kernel_bank.shape[-1]
    z = conv2d(x.reshape(n * c, 1, h, w), _bank_weight(pinv.kernel_bank, x.dtype), 1, (kb // 2, kb // 2), "circular")
    return pixel_shuffle(z, pinv.stride).reshape(n, c, h * pinv.stride, w * pinv.stride)


def apply_pinv_adjoint(pinv: PseudoInverseOperator, g):
    """(A+)^T g."""
    g = np.asarray(g)
    if pinv.mode == "matrix":
        return g @ pinv.matrix
    gz, n, c = _unshuffle(pinv, g)
    kb = pinv.kernel_bank.shape[-1]
    dummy = np.zeros((n * c, 1) + gz.shape[2:], dtype=g.dtype)
    _, gx = conv2d_backward(gz, dummy, _bank_weight(pinv.kernel_bank, g.dtype), 1, (kb // 2, kb // 2), "circular")
    return gx.reshape(n, c, *gz.shape[2:])


def _unshuffle(pinv, g):
    n, c, H, W = g.shape
    return pixel_unshuffle(g.reshape(n * c, 1, H, W), pinv.stride), n, c


def pinv_param_grad(pinv: PseudoInverseOperator, x, g):
    """d<g, A+ x>/d(A+ parameters), summed over the batch."""
    if pinv.mode == "matrix":
        return g.T @ x
    gz, n, c = _unshuffle(pinv, g)
    kb = pinv.kernel_bank.shape[-1]
    xs = x.reshape(n * c, 1, *x.shape[2:])
    dw, _ = conv2d_backward(gz, xs, _bank_weight(pinv.kernel_bank, g.dtype), 1, (kb // 2, kb // 2), "circular",
                            need_input=False)
    return dw[:, 0]


def _params(pinv):
    return pinv.matrix if pinv.mode == "matrix" else pinv.kernel_bank


def pinv_fit_loss(op: DownsampleOperator, pinv: PseudoInverseOperator, y, x):
    """Monte Carlo l1 + l2 on given HR draws ``y`` and LR draws ``x``, plus gradient."""
    n1, n2 = len(y), len(x)
    A = lambda v: apply_downsample(op, v)
    At = lambda v: apply_downsample_adjoint(op, v)
    B = lambda v: apply_pinv(pinv, v)
    Bt = lambda v: apply_pinv_adjoint(pinv, v)
    u = A(y)
    r1 = u - A(B(u))
    v = B(x)
    w = A(v)
    r2 = v - B(w)
    l1 = float(np.sum(r1 * r1)) / n1
    l2 = float(np.sum(r2 * r2)) / n2
    g1 = -2.0 / n1 * At(r1)
    g2 = 2.0 / n2 * r2
    grad = pinv_param_grad(pinv, u, g1)
    grad = grad + pinv_param_grad(pinv, x, g2 - At(Bt(g2))) - pinv_param_grad(pinv, w, g2)
    return l1, l2, grad


def fit_pseudoinverse(op: DownsampleOperator, cfg: PinvFitConfig | None = None) -> PseudoInverseOperator:
    """Fit A+ by heavy-ball SGD on E||Ay - ABAy||^2 + E||Bx - BABx||^2 with standard normal draws.

    Starting from a multiple of A^T keeps the iterates in the row space of A,
    so in matrix mode they converge to the Moore-Penrose inverse rather than
    some other right inverse. B = 0 stays in that space too but can stall near
    rank-deficient stationary points where AB is only a partial projector.
    """
    cfg = cfg or PinvFitConfig()
    rng = np.random.default_rng(cfg.seed)
    pinv = _initial_pinv(op, cfg)
    hr = (1,) + tuple(op.in_shape) if op.mode == "conv" else op.hr_shape()
    lr = (1,) + tuple(op.out_shape) if op.mode == "conv" else op.lr_shape()
    fit_op = op if op.channels == 1 or op.mode == "matrix" else DownsampleOperator(
        "conv", op.stride, op.in_shape, 1, op.kernel, sigma_blur=op.sigma_blur)
    theta = _params(pinv)
    vel = np.zeros_like(theta)
    for it in range(cfg.iterations):
        y = rng.standard_normal((cfg.sample_count,) + hr)
        x = rng.standard_normal((cfg.sample_count,) + lr)
        l1, l2, grad = pinv_fit_loss(fit_op, pinv, y, x)
        if not np.isfinite(l1 + l2) or not np.all(np.isfinite(grad)):
            raise FloatingPointError(f"pseudoinverse fit diverged at iteration {it} (loss {l1 + l2!r})")
        vel = cfg.momentum * vel - cfg.lr * grad
        theta += vel
    eval_rng = np.random.default_rng([cfg.seed, 1])
    y = eval_rng.standard_normal((cfg.eval_samples,) + hr)
    x = eval_rng.standard_normal((cfg.eval_samples,) + lr)
    l1, l2, _ = pinv_fit_loss(fit_op, pinv, y, x)
    if not np.isfinite(l1 + l2):
        raise FloatingPointError(f"pseudoinverse fit diverged at iteration {cfg.iterations}")
    pinv.fit_loss = l1 + l2
    pinv.fit_config = asdict(cfg)
    pinv.channels = op.channels
    return pinv


def adjoint_bank(op: DownsampleOperator, kernel_size):
    """Sub-pixel kernel bank implementing A^T (taps outside ``kernel_size`` dropped)."""
    s, k, lo = op.stride, op.kernel.shape[0], op.pad[0]
    half = kernel_size // 2
    bank = np.zeros((s * s, kernel_size, kernel_size))
    for di in range(s):
        for dj in range(s):
            for p in range(-half, half + 1):
                for q in range(-half, half + 1):
                    a, b = di - p * s + lo, dj - q * s + lo
                    if 0 <= a < k and 0 <= b < k:
                        bank[di * s + dj, p + half, q + half] = op.kernel[a, b]
    return bank


def _initial_pinv(op, cfg):
    if op.mode == "matrix":
        B = np.zeros(op.matrix.T.shape)
        if cfg.init == "adjoint":
            B = op.matrix.T / np.sum(op.matrix ** 2, axis=1).mean()
        return PseudoInverseOperator("matrix", 1, op.out_shape, 1, matrix=B)
    kb = cfg.kernel_size
    bank = np.zeros((op.stride ** 2, kb, kb))
    if cfg.init == "adjoint":
        bank = adjoint_bank(op, kb) / np.sum(op.kernel ** 2)
    return PseudoInverseOperator("conv", op.stride, op.out_shape, 1, kernel_bank=bank)


def closed_form_pseudoinverse(op: DownsampleOperator) -> PseudoInverseOperator:
    """B = A^T (A A^T)^-1 (matrix mode only)."""
    if op.mode != "matrix":
        raise ValueError("closed form is only available in matrix mode")
    A = op.matrix
    G = A @ A.T
    if np.linalg.matrix_rank(G) < G.shape[0]:
        raise np.linalg.LinAlgError("A A^T is singular; A has dependent rows")
    B = A.T @ np.linalg.inv(G)
    return PseudoInverseOperator("matrix", 1, op.out_shape, 1, matrix=B, fit_loss=0.0,
                                 fit_config={"method": "closed_form"})


def identity_pseudoinverse(op: DownsampleOperator, kernel_size=1):
    bank = np.zeros((1, kernel_size, kernel_size))
    bank[0, kernel_size // 2, kernel_size // 2] = 1.0
    return PseudoInverseOperator("conv", 1, op.out_shape, op.channels, kernel_bank=bank, fit_loss=0.0)


def random_pseudoinverse(op: DownsampleOperator, kernel_size=5, seed=0, scale=None):
    """A randomly initialised up-convolution of the right shape (not an inverse)."""
    rng = np.random.default_rng(seed)
    scale = scale if scale is not None else 1.0 / kernel_size
    bank = rng.uniform(-scale, scale, (op.stride ** 2, kernel_size, kernel_size))
    return PseudoInverseOperator("conv", op.stride, op.out_shape, op.channels, kernel_bank=bank)


# ---------------------------------------------------------------------------
# affine projection
# ---------------------------------------------------------------------------

class ConsistencyError(RuntimeError):
    def __init__(self, residual, tolerance):
        super().__init__(f"projected output violates A y = x: residual {residual:.3e} > tolerance {tolerance:.1e}")
        self.residual = residual
        self.tolerance = tolerance


@dataclass
class AffineProjector:
    down: DownsampleOperator
    up: PseudoInverseOperator
    tolerance: float | None = None
    check: bool = False

    def __post_init__(self):
        if self.tolerance is None:
            self.tolerance = 1e-10 if self.down.mode == "matrix" else 1e-6


def project(proj: AffineProjector, f_out, x, check=None):
    """y = f - A+(A f) + A+ x, i.e. (I - A+A) f + A+ x."""
    f_out = np.asarray(f_out)
    x = np.asarray(x)
    _check(f_out, proj.down.hr_shape(), "project(f_out)")
    _check(x, proj.down.lr_shape(), "project(x)")
    y = f_out + apply_pinv(proj.up, x - apply_downsample(proj.down, f_out))
    if proj.check if check is None else check:
        res = float(np.max(np.abs(apply_downsample(proj.down, y) - x), initial=0.0))
        if not res <= proj.tolerance:
            raise ConsistencyError(res, proj.tolerance)
    return y


def project_gradient(proj: AffineProjector, upstream):
    """Backward pass of :func:`project` w.r.t. ``f_out``: (I - A+A)^T g."""
    upstream = np.asarray(upstream)
    _check(upstream, proj.down.hr_shape(), "project_gradient")
    return upstream - apply_downsample_adjoint(proj.down, apply_pinv_adjoint(proj.up, upstream))


def project_backward(proj: AffineProjector, f_out, x, upstream):
    """Full backward pass: gradients for ``f_out``, ``x`` and the A+ parameters."""
    g_f = project_gradient(proj, upstream)
    g_x = apply_pinv_adjoint(proj.up, upstream)
    g_up = pinv_param_grad(proj.up, x - apply_downsample(proj.down, f_out), upstream)
    return g_f, g_x, g_up


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------

def save_operator(path, op: DownsampleOperator, pinv: PseudoInverseOperator | None = None, seed=None,
                  dtype="float32"):
    arrays = {"A.kernel": op.kernel} if op.mode == "conv" else {"A.matrix": op.matrix}
    meta = {"kind": "affine-projector", "down": op.to_meta(), "seed": seed}
    if pinv is not None:
        arrays["Aplus." + ("kernel_bank" if pinv.mode == "conv" else "matrix")] = _params(pinv)
        meta["up"] = pinv.to_meta()
        meta["up"]["kernel_size"] = None if pinv.mode == "matrix" else pinv.kernel_bank.shape[-1]
    return save_bundle(path, meta, arrays, dtype)


def load_operator(path):
    meta, arrays = load_bundle(path)
    d = meta["down"]
    if d["mode"] == "matrix":
        op = DownsampleOperator("matrix", matrix=arrays["A.matrix"])
    else:
        kernel = arrays["A.kernel"]
        if d.get("sigma_blur"):
            # blob may be float32; rebuild the exact unit-sum kernel
            kernel = gaussian_kernel(kernel.shape[0], d["sigma_blur"])
        else:
            kernel = kernel / kernel.sum()
        op = DownsampleOperator("conv", d["stride"], tuple(d["in_shape"]), d["channels"], kernel,
                                sigma_blur=d.get("sigma_blur"))
    pinv = None
    if "up" in meta:
        u = meta["up"]
        pinv = PseudoInverseOperator(u["mode"], u["stride"], tuple(u["lr_shape"]), u["channels"],
                                     kernel_bank=arrays.get("Aplus.kernel_bank"), matrix=arrays.get("Aplus.matrix"),
                                     fit_loss=u["fit_loss"], fit_config=u["fit_config"])
    return op, pinv
