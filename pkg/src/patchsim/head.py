"""Next-patch mixture head.

From a decoder feature the head predicts, per behavior mode, the full
next patch: mode probabilities from the feature paired with each learnable
mode embedding, then a recurrent unroll that emits one state per step.
Positions and velocities get Laplace location/scale parameters; yaw gets a
von Mises location/concentration pair. The recurrent hidden state is
updated from the predicted location parameters only (never from ground
truth and never from sampled values).

Scales and concentrations are made strictly positive by softplus plus a
1e-3 floor, so every finite target has finite log-likelihood.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .nn import EVAL_CTX, MLP, ForwardCtx, GRUCell, Module, _uniform

LOG_2PI = float(np.log(2.0 * np.pi))
POSITIVE_FLOOR = 1e-3
STATE_DIM = 6  # x, y, z, vx, vy, yaw
SCALE_DIM = 5  # Laplace scales for position + velocity

_I0_SERIES_CUTOFF = 20.0
_I0_SERIES_TERMS = 60
# (2k-1)!!^2 / (k! 8^k): asymptotic series coefficients for I0
_I0_ASYMPT = (0.125, 0.0703125, 0.0732421875, 0.112152099609375,
              0.22710800170898438, 0.5725014209747314)


def _bessel_series(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Taylor series of I0 and I1, accurate to machine precision for x <= 20."""
    t = 0.25 * x * x
    i0 = np.ones_like(x)
    i1 = 0.5 * x.copy()
    term0 = np.ones_like(x)
    term1 = 0.5 * x.copy()
    for m in range(1, _I0_SERIES_TERMS + 1):
        term0 = term0 * t / (m * m)
        i0 = i0 + term0
        term1 = term1 * t / (m * (m + 1))
        i1 = i1 + term1
    return i0, i1


def _asympt_s(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Truncated asymptotic series S(x) and S'(x) with I0 ~ e^x S / sqrt(2 pi x)."""
    s = np.ones_like(x)
    ds = np.zeros_like(x)
    for k, c in enumerate(_I0_ASYMPT, start=1):
        s = s + c * x ** (-k)
        ds = ds - k * c * x ** (-k - 1)
    return s, ds


def log_i0(x: np.ndarray) -> np.ndarray:
    """log of the modified Bessel function I0, abs. error < 1e-7."""
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    small = x <= _I0_SERIES_CUTOFF
    if np.any(small):
        i0, _ = _bessel_series(x[small])
        out[small] = np.log(i0)
    if np.any(~small):
        xl = x[~small]
        s, _ = _asympt_s(xl)
        out[~small] = xl - 0.5 * np.log(2.0 * np.pi * xl) + np.log(s)
    return out


def dlog_i0(x: np.ndarray) -> np.ndarray:
    """Derivative of log_i0 (equals I1/I0), consistent with the forward."""
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    small = x <= _I0_SERIES_CUTOFF
    if np.any(small):
        i0, i1 = _bessel_series(x[small])
        out[small] = i1 / i0
    if np.any(~small):
        xl = x[~small]
        s, ds = _asympt_s(xl)
        out[~small] = 1.0 - 0.5 / xl + ds / s
    return out


def log_i0_t(x: Tensor) -> Tensor:
    return ad.lift_unary(x, log_i0, dlog_i0)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def laplace_logpdf(x, mu, b) -> Tensor:
    """Laplace log-density, summed over the trailing axis (if any)."""
    x, mu, b = _as_tensor(x), _as_tensor(mu), _as_tensor(b)
    if np.any(b.data <= 0.0):
        raise ValueError("laplace_logpdf requires strictly positive scale b")
    ll = ad.sub(
        ad.neg(ad.log(ad.mul(b, ad.tensor(2.0)))),
        ad.div(ad.absolute(ad.sub(x, mu)), b),
    )
    if ll.ndim > 0:
        ll = ad.reduce_sum(ll, axis=-1)
    return ll


def von_mises_logpdf(theta, mu, kappa) -> Tensor:
    """von Mises log-density on the circle; kappa -> 0 recovers uniform."""
    theta, mu, kappa = _as_tensor(theta), _as_tensor(mu), _as_tensor(kappa)
    if np.any(kappa.data <= 0.0):
        raise ValueError("von_mises_logpdf requires strictly positive kappa")
    return ad.sub(
        ad.mul(kappa, ad.cos(ad.sub(theta, mu))),
        ad.add(log_i0_t(kappa), ad.tensor(LOG_2PI)),
    )


@dataclass
class MixtureParams:
    """Per-prediction mixture parameters, leading batch axis N.

    pi [N,K] sums to 1 over modes; mu [N,K,ell,6]; b [N,K,ell,5] > 0;
    kappa [N,K,ell] > 0. log_pi carries the numerically safe log of pi.
    """

    pi: Tensor
    mu: Tensor
    b: Tensor
    kappa: Tensor
    log_pi: Tensor

    @property
    def n_modes(self) -> int:
        return self.pi.shape[-1]

    @property
    def patch_len(self) -> int:
        return self.mu.shape[-2]


def _positive(raw: Tensor) -> Tensor:
    return ad.add(ad.softplus(raw), ad.tensor(POSITIVE_FLOOR))


class NextPatchHead(Module):
    """Mixture head: pi from [F, Z_k]; per mode a GRU unrolls ell states."""

    def __init__(self, rng, d: int, n_modes: int, patch_len: int):
        self.d = d
        self.n_modes = n_modes
        self.patch_len = patch_len
        self.mode_emb = _uniform(rng, (n_modes, d), 0.1)
        self.pi_mlp = MLP(rng, [2 * d, d, 1])
        self.par_mlp = MLP(rng, [2 * d, d, STATE_DIM + SCALE_DIM + 1])
        self.mu_in = MLP(rng, [STATE_DIM, d])
        self.gru = GRUCell(rng, d, d)

    def predict_batch(self, f: Tensor, ctx: ForwardCtx = EVAL_CTX) -> MixtureParams:
        """f: [N, d] decoder features -> MixtureParams for the next patch."""
        n = f.shape[0]
        k, d, ell = self.n_modes, self.d, self.patch_len
        f_rep = ad.broadcast_to(ad.reshape(f, (n, 1, d)), (n, k, d))
        z_rep = ad.broadcast_to(ad.reshape(self.mode_emb, (1, k, d)), (n, k, d))
        fz = ad.concat([f_rep, z_rep], axis=-1)
        scores = ad.reshape(self.pi_mlp(fz), (n, k))
        log_pi = ad.sub(scores, ad.logsumexp(scores, axis=-1, keepdims=True))

        h = ad.reshape(f_rep, (n * k, d))
        z_flat = ad.reshape(z_rep, (n * k, d))
        mus, bs, kappas = [], [], []
        for t in range(ell):
            par = self.par_mlp(ad.concat([h, z_flat], axis=-1))
            mu_t = ad.narrow(par, 1, 0, STATE_DIM)
            b_t = _positive(ad.narrow(par, 1, STATE_DIM, SCALE_DIM))
            kappa_t = _positive(ad.narrow(par, 1, STATE_DIM + SCALE_DIM, 1))
            mus.append(mu_t)
            bs.append(b_t)
            kappas.append(kappa_t)
            if t + 1 < ell:
                # hidden update consumes predicted locations, nothing else
                h = self.gru(h, self.mu_in(mu_t))
        mu = ad.reshape(ad.stack(mus, axis=1), (n, k, ell, STATE_DIM))
        b = ad.reshape(ad.stack(bs, axis=1), (n, k, ell, SCALE_DIM))
        kappa = ad.reshape(ad.stack(kappas, axis=1), (n, k, ell))
        return MixtureParams(pi=ad.exp(log_pi), mu=mu, b=b, kappa=kappa, log_pi=log_pi)

    def predict_patch_params(self, f: Tensor, ctx: ForwardCtx = EVAL_CTX) -> MixtureParams:
        """Single-feature variant: f is [d]."""
        return self.predict_batch(ad.reshape(f, (1, self.d)), ctx)


def mode_log_likelihoods(targets: np.ndarray, mp: MixtureParams) -> Tensor:
    """Per-mode patch log-likelihood [N, K] for targets [N, ell, 6]."""
    targets = np.asarray(targets, dtype=np.float64)
    t = Tensor(targets[:, None, :, :])  # [N,1,ell,6]
    diff = ad.sub(t, mp.mu)
    lin = ad.narrow(diff, 3, 0, SCALE_DIM)
    lap = ad.sub(
        ad.neg(ad.log(ad.mul(mp.b, ad.tensor(2.0)))),
        ad.div(ad.absolute(lin), mp.b),
    )
    ll_lap = ad.reduce_sum(lap, axis=(2, 3))
    dyaw = ad.reshape(ad.narrow(diff, 3, SCALE_DIM, 1), mp.kappa.shape)
    vm = ad.sub(
        ad.mul(mp.kappa, ad.cos(dyaw)),
        ad.add(log_i0_t(mp.kappa), ad.tensor(LOG_2PI)),
    )
    ll_vm = ad.reduce_sum(vm, axis=2)
    return ad.add(ll_lap, ll_vm)


def patch_log_likelihood(target: np.ndarray, mp: MixtureParams, mode: int) -> Tensor:
    """Log-likelihood of one frame-transformed target patch under one mode.

    target is [ell, 6] (positions, planar velocities, yaw in the previous
    patch's frame); mp must carry a leading batch axis of 1.
    """
    target = np.asarray(target, dtype=np.float64)
    if target.shape != (mp.patch_len, STATE_DIM):
        raise ValueError(
            f"target shape {target.shape} != ({mp.patch_len}, {STATE_DIM})"
        )
    if not np.all(np.isfinite(target)):
        raise ValueError("target patch contains non-finite steps; mask before scoring")
    ll = mode_log_likelihoods(target[None], mp)
    return ad.reshape(ad.narrow(ll, 1, mode, 1), ())


def mixture_nll(targets: np.ndarray, mp: MixtureParams) -> Tensor:
    """Total negative log-likelihood over all predictions in the batch."""
    ll = ad.add(mp.log_pi, mode_log_likelihoods(targets, mp))
    return ad.neg(ad.reduce_sum(ad.logsumexp(ll, axis=-1)))
