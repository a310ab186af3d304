"""Reverse-mode gradients through the forward pipeline, dice loss, and SGD.

The computation graph is fixed, so the adjoints are written out by hand:
sigmoid, the piecewise rescale, max fusion (gradient routed to the winning
branch; ties go to the lowest scale index), the tubularness measure, the
closed-form eigenvalues (discriminant clamped before the adjoint division),
the convolution adjoint with respect to each kernel, and the resize
adjoints. Trainables are the nine kernels and the six (beta, c) scalars.
"""

import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.signal import correlate

from .image import BORDER, OUTPUT_SIZE, ShapeError, extract_patch_set
from .forward import (
    EPS_DIV,
    _single_scale_trace,
    _stack_scale_maps,
    frangi_net_forward,
    rescale_sigmoid,
)
from .params import BETA_MIN, C_MIN, copy_params

# Floor for the eigenvalue discriminant in the adjoint: at isotropic pixels
# the decomposition is non-differentiable, so the division is bounded.
DISC_FLOOR = 1e-12


@dataclass
class TrainConfig:
    learning_rate: float = 1e-6
    momentum: float = 0.5
    batch_size: int = 250
    steps: int = 1000
    rng_seed: int = 0
    dice_epsilon: float = 1.0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError(f"learning_rate must be positive, got {self.learning_rate}")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.steps < 1:
            raise ValueError(f"steps must be >= 1, got {self.steps}")
        if self.dice_epsilon <= 0:
            raise ValueError(f"dice_epsilon must be positive, got {self.dice_epsilon}")


@dataclass
class Tape:
    """Forward intermediates of one patch-set pass, enough for all adjoints."""

    scales: list
    fused: np.ndarray
    winner: np.ndarray
    delta: np.ndarray
    prob: np.ndarray
    threshold: float
    neg_scale: float
    pos_scale: float
    polarity: str


@dataclass
class ScaleGradients:
    d_kxx: np.ndarray
    d_kxy: np.ndarray
    d_kyy: np.ndarray
    d_beta: float
    d_c: float


@dataclass
class Gradients:
    """Adjoints mirroring FrangiNetParams' trainable fields."""

    scales: list

    @classmethod
    def zeros(cls, params):
        return cls(scales=[
            ScaleGradients(
                d_kxx=np.zeros_like(sp.kernels.kxx),
                d_kxy=np.zeros_like(sp.kernels.kxy),
                d_kyy=np.zeros_like(sp.kernels.kyy),
                d_beta=0.0,
                d_c=0.0,
            )
            for sp in params.scales
        ])

    def add_(self, other):
        for a, b in zip(self.scales, other.scales):
            a.d_kxx += b.d_kxx
            a.d_kxy += b.d_kxy
            a.d_kyy += b.d_kyy
            a.d_beta += b.d_beta
            a.d_c += b.d_c
        return self

    def scale_(self, s):
        for a in self.scales:
            a.d_kxx *= s
            a.d_kxy *= s
            a.d_kyy *= s
            a.d_beta *= s
            a.d_c *= s
        return self

    def all_finite(self):
        return all(
            np.isfinite(g.d_kxx).all() and np.isfinite(g.d_kxy).all()
            and np.isfinite(g.d_kyy).all() and np.isfinite(g.d_beta)
            and np.isfinite(g.d_c)
            for g in self.scales
        )


def forward_with_tape(ps, params, polarity=None):
    """Forward pass that records every intermediate the adjoints need.

    The recorded arithmetic is identical to frangi_net_forward, so replaying
    the tape reproduces a fresh forward pass bit for bit.
    """
    pol = params.polarity if polarity is None else polarity
    traces = [
        _single_scale_trace(patch, i, sp, pol)
        for i, (patch, sp) in enumerate(zip(ps.patches, params.scales))
    ]
    stack = _stack_scale_maps([tr.vessel for tr in traces])
    fused = stack.max(axis=0)
    winner = stack.argmax(axis=0)  # first max wins: ties go to the lowest index
    delta = fused - params.threshold
    prob = rescale_sigmoid(fused, params.threshold, params.neg_scale, params.pos_scale)
    return Tape(
        scales=traces, fused=fused, winner=winner, delta=delta, prob=prob,
        threshold=params.threshold, neg_scale=params.neg_scale,
        pos_scale=params.pos_scale, polarity=pol,
    )


def dice_loss(p, g, epsilon=1.0):
    """Soft dice complement: 1 - (2 sum(p*g) + eps) / (sum(p) + sum(g) + eps)."""
    if epsilon <= 0:
        raise ValueError(f"epsilon must be positive, got {epsilon}")
    p = np.asarray(p, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    if p.shape != g.shape:
        raise ShapeError(f"prediction {p.shape} and label {g.shape} dims differ")
    num = 2.0 * float((p * g).sum()) + epsilon
    den = float(p.sum()) + float(g.sum()) + epsilon
    return 1.0 - num / den


def _block_sum(a, factor):
    """Adjoint of nearest-neighbor upsampling: sum each factor x factor block."""
    if factor == 1:
        return a
    h, w = a.shape
    return a.reshape(h // factor, factor, w // factor, factor).sum(axis=(1, 3))


def _kernel_grad(x, upstream):
    """Adjoint of valid cross-correlation w.r.t. the kernel.

    d_k[a, b] = sum_ij upstream[i, j] * x[i + a, j + b], which is itself a
    valid cross-correlation of the input with the upstream gradient.
    """
    return correlate(x, upstream, mode="valid", method="auto")


def _backward_scale(tr, d_vessel):
    """Adjoints of one branch given the gradient on its 128x128 output."""
    d_vsmall = _block_sum(d_vessel, tr.factor)

    # Tubularness: v = blob_term * (1 - struct_exp) on open-gate pixels.
    open_gate = ~tr.gate
    d_vs = np.where(open_gate, d_vsmall, 0.0)
    one_minus_e = 1.0 - tr.struct_exp
    d_blob = d_vs * one_minus_e
    d_struct_exp = -d_vs * tr.blob_term

    beta, c = tr.beta, tr.c
    s_sq = tr.lam1 * tr.lam1 + tr.lam2 * tr.lam2
    # blob_term = exp(-rb^2 / (2 beta^2)); struct_exp = exp(-s_sq / (2 c^2))
    d_rb = d_blob * tr.blob_term * (-tr.rb / (beta * beta))
    d_beta = float((d_blob * tr.blob_term * (tr.rb * tr.rb) / beta**3).sum())
    d_s_sq = d_struct_exp * tr.struct_exp * (-1.0 / (2.0 * c * c))
    d_c = float((d_struct_exp * tr.struct_exp * s_sq / c**3).sum())

    abs2 = np.abs(tr.lam2) + EPS_DIV
    d_lam1 = d_rb * np.sign(tr.lam1) / abs2 + d_s_sq * 2.0 * tr.lam1
    d_lam2 = d_rb * (-np.abs(tr.lam1) * np.sign(tr.lam2) / (abs2 * abs2)) + d_s_sq * 2.0 * tr.lam2

    # Eigenvalues: lam_pm = (trace +- sqrt(disc)) / 2 with the recorded
    # magnitude ordering; disc is floored before the division.
    d_plus = np.where(tr.swap, d_lam1, d_lam2)
    d_minus = np.where(tr.swap, d_lam2, d_lam1)
    diff = tr.hxx - tr.hyy
    disc = diff * diff + 4.0 * tr.hxy * tr.hxy
    root = np.sqrt(np.maximum(disc, DISC_FLOOR))
    d_trace = 0.5 * (d_plus + d_minus)
    d_root = 0.5 * (d_plus - d_minus)
    d_disc = d_root / (2.0 * root)
    d_hxx = d_trace + d_disc * 2.0 * diff
    d_hyy = d_trace - d_disc * 2.0 * diff
    d_hxy = d_disc * 8.0 * tr.hxy

    return ScaleGradients(
        d_kxx=_kernel_grad(tr.resized, d_hxx),
        d_kxy=_kernel_grad(tr.resized, d_hxy),
        d_kyy=_kernel_grad(tr.resized, d_hyy),
        d_beta=d_beta,
        d_c=d_c,
    )


def backward(tape, g, epsilon=1.0, loss_scale=1.0):
    """Exact adjoints of dice_loss(forward(...)) for all trainables.

    loss_scale multiplies the loss adjoint, so scaling the loss scales every
    gradient entry by the same factor.
    """
    g = np.asarray(g, dtype=np.float64)
    if g.shape != tape.prob.shape:
        raise ShapeError(f"label {g.shape} does not match tape output {tape.prob.shape}")

    p = tape.prob
    num = 2.0 * float((p * g).sum()) + epsilon
    den = float(p.sum()) + float(g.sum()) + epsilon
    # loss = 1 - num / den
    d_p = loss_scale * (num - 2.0 * g * den) / (den * den)

    d_z = d_p * p * (1.0 - p)
    # The kink at delta == 0 takes the positive-side slope.
    d_fused = d_z * np.where(tape.delta < 0, tape.neg_scale, tape.pos_scale)

    grads = []
    for idx, tr in enumerate(tape.scales):
        d_vessel = np.where(tape.winner == idx, d_fused, 0.0)
        grads.append(_backward_scale(tr, d_vessel))
    return Gradients(scales=grads)


_SCALAR_SELECTORS = ("beta", "c")
_KERNEL_SELECTORS = ("kxx", "kxy", "kyy")


def _apply_selector(params, selector, delta):
    kind = selector[0]
    if kind in _SCALAR_SELECTORS:
        _, scale_idx = selector
        sp = params.scales[scale_idx]
        if kind == "beta":
            sp.beta += delta
        else:
            sp.c += delta
    elif kind in _KERNEL_SELECTORS:
        _, scale_idx, row, col = selector
        getattr(params.scales[scale_idx].kernels, kind)[row, col] += delta
    else:
        raise ValueError(f"invalid selector {selector!r}")


def batch_loss(params, batch, epsilon=1.0, polarity=None):
    """Mean dice loss of untaped forward passes over a batch."""
    losses = [dice_loss(frangi_net_forward(ps, params, polarity), g, epsilon)
              for ps, g in batch]
    return float(np.mean(losses))


def finite_difference_grad(params, batch, selector, h=1e-5, epsilon=1.0, polarity=None):
    """Central-difference derivative of the mean batch loss for one coordinate.

    The selector addresses exactly one scalar: ("beta", scale) / ("c", scale)
    or ("kxx"|"kxy"|"kyy", scale, row, col). Uses two untaped forward passes.
    """
    if h <= 0:
        raise ValueError(f"step size must be positive, got {h}")
    plus = copy_params(params)
    _apply_selector(plus, selector, +h)
    minus = copy_params(params)
    _apply_selector(minus, selector, -h)
    loss_p = batch_loss(plus, batch, epsilon, polarity)
    loss_m = batch_loss(minus, batch, epsilon, polarity)
    return (loss_p - loss_m) / (2.0 * h)


@dataclass
class OptimizerState:
    """Velocity buffers mirroring the trainable parameters, zero-initialized."""

    velocity: Gradients

    @classmethod
    def zeros(cls, params):
        return cls(velocity=Gradients.zeros(params))


def sgd_momentum_step(params, grads, state, cfg):
    """v <- momentum v - lr grad; param <- param + v; beta/c clamped at 1e-3."""
    lr = cfg.learning_rate
    mom = cfg.momentum
    for sp, g, v in zip(params.scales, grads.scales, state.velocity.scales):
        for name, dk, vk in (
            ("kxx", g.d_kxx, v.d_kxx),
            ("kxy", g.d_kxy, v.d_kxy),
            ("kyy", g.d_kyy, v.d_kyy),
        ):
            kern = getattr(sp.kernels, name)
            if dk.shape != kern.shape:
                raise ShapeError(f"gradient shape {dk.shape} != kernel shape {kern.shape}")
            vk *= mom
            vk -= lr * dk
            kern += vk
        v.d_beta = mom * v.d_beta - lr * g.d_beta
        sp.beta = max(sp.beta + v.d_beta, BETA_MIN)
        v.d_c = mom * v.d_c - lr * g.d_c
        sp.c = max(sp.c + v.d_c, C_MIN)
    return params, state


def sample_batch(images, cfg, step):
    """Draw batch_size aligned (PatchSet, 128x128 label) samples.

    Window positions and image choices are uniform under a deterministic
    generator seeded by (rng_seed, step), so the same (seed, step) always
    yields the same batch. Images too small for the 200x200 outer crop are
    skipped with a warning; an empty pool is an error.
    """
    min_side = 2 * BORDER + OUTPUT_SIZE
    pool = []
    for i, (img, mask) in enumerate(images):
        if img.shape[0] < min_side or img.shape[1] < min_side:
            warnings.warn(
                f"image {i} of shape {img.shape} is smaller than "
                f"{min_side}x{min_side}; skipped", stacklevel=2,
            )
            continue
        if img.shape != mask.shape:
            raise ShapeError(f"image {img.shape} and label {mask.shape} dims differ")
        pool.append((img, mask))
    if not pool:
        raise ValueError("no image admits a valid patch position")

    rng = np.random.default_rng((cfg.rng_seed, step))
    batch = []
    for _ in range(cfg.batch_size):
        img, mask = pool[int(rng.integers(0, len(pool)))]
        row = int(rng.integers(BORDER, img.shape[0] - BORDER - OUTPUT_SIZE + 1))
        col = int(rng.integers(BORDER, img.shape[1] - BORDER - OUTPUT_SIZE + 1))
        ps = extract_patch_set(img, (row, col))
        label = mask[row : row + OUTPUT_SIZE, col : col + OUTPUT_SIZE].astype(np.float64)
        batch.append((ps, label))
    return batch


def _item_pass(args):
    ps, g, params, epsilon, polarity = args
    tape = forward_with_tape(ps, params, polarity)
    loss = dice_loss(tape.prob, g, epsilon)
    grads = backward(tape, g, epsilon)
    return loss, grads


def train(dataset, params0, cfg, polarity=None, threads=1):
    """Run the SGD-with-momentum loop; returns (trained params, loss history).

    Per step: sample a batch, forward+tape each item, average the per-item
    dice losses and gradients in fixed item order, then update. Item passes
    may run on a thread pool; the reduction order never changes, so results
    are identical for any thread count. Non-finite losses or gradients
    abort with a diagnostic.
    """
    if not dataset:
        raise ValueError("dataset is empty")
    params = copy_params(params0)
    state = OptimizerState.zeros(params)
    history = []
    pool = ThreadPoolExecutor(max_workers=threads) if threads > 1 else None
    try:
        for step in range(cfg.steps):
            batch = sample_batch(dataset, cfg, step)
            work = [(ps, g, params, cfg.dice_epsilon, polarity) for ps, g in batch]
            results = list(pool.map(_item_pass, work)) if pool else [_item_pass(w) for w in work]

            mean_loss = float(np.mean([loss for loss, _ in results]))
            total = Gradients.zeros(params)
            for _, grads in results:
                total.add_(grads)
            total.scale_(1.0 / len(results))

            if not np.isfinite(mean_loss):
                raise RuntimeError(f"non-finite loss at step {step}: {mean_loss}")
            if not total.all_finite():
                raise RuntimeError(f"non-finite gradient at step {step}")

            sgd_momentum_step(params, total, state, cfg)
            history.append(mean_loss)
    finally:
        if pool:
            pool.shutdown()
    return params, history
