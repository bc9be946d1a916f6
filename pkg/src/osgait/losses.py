"""Training criteria: cross-entropy, sequence Chamfer distance, WGAN-GP."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensorcore as tc
from .tensorcore import Tensor

CE_EPS = 1e-12


@dataclass
class LossReport:
    L_C: float = 0.0
    L_R: float = 0.0
    L_D: float = 0.0
    gp_term: float = 0.0

    @property
    def L(self) -> float:
        return self.L_C + self.L_R


def cross_entropy(pred: Tensor, y) -> Tensor:
    """Mean over rows of -sum_i y_i log(pred_i); log argument clamped at 1e-12."""
    pred = tc.as_tensor(pred)
    y = np.asarray(y, dtype=pred.dtype)
    if y.shape != pred.shape:
        raise ValueError(f"prediction shape {pred.shape} != target shape {y.shape}")
    logp = tc.log(tc.clamp_min(pred, CE_EPS))
    per_row = -(logp * Tensor(y)).sum(axis=-1)
    return per_row.mean() if per_row.ndim else per_row


def joint_loss(L_C, L_R):
    return L_C + L_R


def _sq_dists(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # explicit differences keep d(x, x) exactly 0
    diff = a[..., :, None, :] - b[..., None, :, :]
    return np.einsum("...ijk,...ijk->...ij", diff, diff)


def chamfer_sequence(X, Xh) -> Tensor:
    """Average over frames of the two-sided squared-distance Chamfer sum.

    Inputs are (N_f, P, D) or batched (B, N_f, P, D); point counts may differ
    between the two arguments. A batch returns the mean over samples.
    Gradients flow through the selected nearest neighbours (first index wins
    on ties).
    """
    X, Xh = tc.as_tensor(X), tc.as_tensor(Xh)
    if X.ndim not in (3, 4) or X.ndim != Xh.ndim:
        raise ValueError("chamfer_sequence expects (N_f, P, D) or (B, N_f, P, D) inputs")
    if X.shape[:-2] != Xh.shape[:-2] or X.shape[-1] != Xh.shape[-1]:
        raise ValueError(f"frame layout mismatch: {X.shape} vs {Xh.shape}")
    if X.shape[-2] == 0 or Xh.shape[-2] == 0:
        raise ValueError("chamfer_sequence on an empty frame")
    a = X.data if X.ndim == 4 else X.data[None]
    b = Xh.data if Xh.ndim == 4 else Xh.data[None]
    B, F = a.shape[:2]
    d = _sq_dists(a, b)                     # (B, F, P, Q)
    nn_ab = d.argmin(axis=3)                # for every x, its nearest x_hat
    nn_ba = d.argmin(axis=2)                # for every x_hat, its nearest x
    term_a = d.min(axis=3).sum(axis=2)      # (B, F)
    term_b = d.min(axis=2).sum(axis=2)
    value = (term_a + term_b).mean(axis=1).mean()
    scale = 1.0 / (B * F)

    def bw(g):
        g = float(g) * scale
        bi, fi = np.meshgrid(np.arange(B), np.arange(F), indexing="ij")
        # direction x -> nearest x_hat
        near_b = np.take_along_axis(b, nn_ab[..., None], axis=2)        # (B,F,P,D)
        diff_a = a - near_b
        # direction x_hat -> nearest x
        near_a = np.take_along_axis(a, nn_ba[..., None], axis=2)        # (B,F,Q,D)
        diff_b = b - near_a
        ga = gb = None
        if X.requires_grad:
            ga = 2 * g * diff_a
            np.add.at(ga, (bi[..., None], fi[..., None], nn_ba), -2 * g * diff_b)
            ga = ga if X.ndim == 4 else ga[0]
        if Xh.requires_grad:
            gb = 2 * g * diff_b
            np.add.at(gb, (bi[..., None], fi[..., None], nn_ab), -2 * g * diff_a)
            gb = gb if Xh.ndim == 4 else gb[0]
        return ga, gb

    return tc._node(np.asarray(value, dtype=a.dtype), (X, Xh), bw, "chamfer")


def _critic_inputs(z, labels_onehot) -> Tensor:
    return tc.concat([tc.as_tensor(z), Tensor(np.asarray(labels_onehot, dtype=tc.as_tensor(z).dtype))],
                     axis=-1)


class _LatentSlice:
    """Critic seen as a function of the latent part only, labels held fixed."""

    def __init__(self, critic, onehot: np.ndarray):
        self.critic, self.onehot = critic, onehot

    def __call__(self, z):
        return self.critic(_critic_inputs(z, self.onehot))


def gradient_penalty(critic, z_hat, labels_onehot) -> Tensor:
    """mean over rows of (||grad_z D(z, label)||_2 - 1)^2."""
    K = z_hat.shape[-1]
    x = _critic_inputs(z_hat, labels_onehot)
    if hasattr(critic, "input_gradient"):
        norms = tc.gradient_norm_of_scalar_fn(critic, x, columns=slice(0, K))
    else:
        norms = tc.gradient_norm_of_scalar_fn(_LatentSlice(critic, labels_onehot), tc.as_tensor(z_hat))
    return tc.square(norms - 1.0).mean()


def wgan_gp_discriminator_loss(critic, z, z_star, labels_onehot, lam: float,
                               rng: np.random.Generator, return_parts: bool = False):
    """E[D(z|y)] - E[D(z*|y)] + lam * E[(||grad D(z_hat|y)|| - 1)^2].

    z_hat = t z + (1 - t) z*, one t ~ U(0, 1) per pair. ``z`` and ``z_star``
    enter as constants; gradients reach only the critic parameters.
    """
    z = np.asarray(z.data if isinstance(z, Tensor) else z)
    zs = np.asarray(z_star.data if isinstance(z_star, Tensor) else z_star)
    if z.shape != zs.shape or z.shape[0] != np.shape(labels_onehot)[0]:
        raise ValueError(f"batch mismatch: {z.shape}, {zs.shape}, {np.shape(labels_onehot)}")
    fake = critic(_critic_inputs(Tensor(z), labels_onehot)).mean()
    real = critic(_critic_inputs(Tensor(zs), labels_onehot)).mean()
    t = rng.uniform(size=(z.shape[0], 1)).astype(z.dtype)
    z_hat = t * z + (1.0 - t) * zs
    gp = gradient_penalty(critic, Tensor(z_hat), labels_onehot)
    loss = fake - real + lam * gp
    if return_parts:
        return loss, float(fake.data - real.data), float(gp.data)
    return loss


def encoder_adversarial_loss(critic, z: Tensor, labels_onehot) -> Tensor:
    """-E[D(z|y)]; pushes the encoder output toward the prior."""
    return -critic(_critic_inputs(z, labels_onehot)).mean()
