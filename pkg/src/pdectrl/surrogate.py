"""Neural surrogates of PDE solution operators and their Phase-1 losses.

:class:`OperatorSurrogate` maps a control field to the state it induces
(steady problems) and also reconstructs the control through its own
autoencoder branch. :class:`TimeSurrogate` advances a state by one
control interval in latent space (time-dependent problems).

Both follow the scikit-learn estimator conventions: hyperparameters are
constructor arguments, ``fit`` returns ``self``, fitted state ends in ``_``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from . import pde
from . import tensor as T
from .networks import SteadyNetwork, TimeNetwork
from .trainer import TrainConfig, train_phase1
from .validation import check_fields, check_pairs


@dataclass(frozen=True)
class LossWeights:
    """Phase-1 weights: ``lambda_rec`` for steady models; ``time`` weights
    apply to (latent match, state match, state reconstruction, control
    reconstruction)."""

    lambda_rec: float = 1.5
    time: tuple[float, float, float, float] = (1.0, 1.5, 0.5, 1.0)

    def __post_init__(self):
        if self.lambda_rec < 0 or any(w < 0 for w in self.time):
            raise ValueError("loss weights must be non-negative")


# ---------------------------------------------------------------- losses

def _sample_dims(t: torch.Tensor, ndim: int) -> tuple[int, ...]:
    return tuple(range(t.dim() - ndim, t.dim()))


def relative_error(u: torch.Tensor, ref: torch.Tensor, ndim: int | None = None) -> torch.Tensor:
    """``||u - ref|| / ||ref||``; per sample over the trailing ``ndim`` axes.

    Without ``ndim`` the whole tensor is one sample and a scalar is returned.
    """
    if u.shape != ref.shape:
        raise ValueError(f"relative_error shape mismatch: {tuple(u.shape)} vs {tuple(ref.shape)}")
    dims = None if ndim is None else _sample_dims(ref, ndim)
    den = T.l2norm(ref, dims)
    if torch.any(den == 0):
        raise ValueError("relative error undefined for a zero-norm reference")
    return T.l2norm(u - ref, dims) / den


def loss_supervised(net: SteadyNetwork, m: torch.Tensor, u: torch.Tensor, ndim: int) -> torch.Tensor:
    if len(m) == 0:
        raise ValueError("empty batch")
    return relative_error(net.solve(m), u, ndim).mean()


def loss_residual_poisson(u: torch.Tensor, m: torch.Tensor, h: float) -> torch.Tensor:
    """Mean squared discrete L2 norm of ``-Δ_h u - m`` over interior nodes.

    ``u`` is a batch of predicted states; the Laplacian is a fixed conv kernel.
    """
    if u.shape != m.shape or u.dim() != 3:
        raise ValueError(f"expected matching (batch, n, n) tensors, got {tuple(u.shape)} and {tuple(m.shape)}")
    kernel = T.as_tensor(pde.laplacian_kernel(h)).reshape(1, 1, 3, 3)
    lap = T.conv2d(u.unsqueeze(1), kernel).squeeze(1)
    res = -lap - m[:, 1:-1, 1:-1]
    return (h ** 2 * (res * res).sum(dim=(1, 2))).mean()


def loss_reconstruction(net, m: torch.Tensor, ndim: int) -> torch.Tensor:
    return relative_error(net.reconstruct(m), m, ndim).mean()


def loss_total_phase1(net: SteadyNetwork, m: torch.Tensor, u: torch.Tensor | None,
                      mode: str, weights: LossWeights, ndim: int, h: float | None = None) -> torch.Tensor:
    pred, rec = net(m)
    if mode == "supervised":
        if u is None:
            raise ValueError("supervised mode needs state labels")
        base = relative_error(pred, u, ndim).mean()
    elif mode == "residual":
        if ndim != 2 or h is None:
            raise ValueError("residual mode is implemented for the 2D Poisson problem only")
        base = loss_residual_poisson(pred, m, h)
    else:
        raise ValueError(f"unknown phase-1 mode {mode!r}")
    if weights.lambda_rec == 0:
        return base
    return base + weights.lambda_rec * relative_error(rec, m, ndim).mean()


def loss_total_time_phase1(net: TimeNetwork, states: torch.Tensor, controls: torch.Tensor,
                           weights: LossWeights) -> torch.Tensor:
    """Teacher-forced loss over trajectories.

    ``states`` is ``(N, n+1, nx)`` and ``controls`` ``(N, n, nx)``. Terms are
    summed over time and averaged over trajectories.
    """
    if states.shape[1] != controls.shape[1] + 1 or states.shape[2:] != controls.shape[2:]:
        raise ValueError(f"misaligned sequences: states {tuple(states.shape)}, controls {tuple(controls.shape)}")
    w_lat, w_state, w_srec, w_crec = weights.time
    v = net.state_enc(states)                      # (N, n+1, c, L)
    g = net.control_enc(controls)                  # (N, n, c, L)
    v_next = net.step_latent(v[:, :-1], g)         # (N, n, c, L)
    u_next = net.state_rec(v_next)                 # (N, n, nx)
    total = states.new_zeros(())
    if w_lat:
        total = total + w_lat * relative_error(v_next, v[:, 1:], 2).sum(1).mean()
    if w_state:
        total = total + w_state * relative_error(u_next, states[:, 1:], 1).sum(1).mean()
    if w_srec:
        total = total + w_srec * relative_error(net.state_rec(v), states, 1).sum(1).mean()
    if w_crec:
        total = total + w_crec * relative_error(net.control_rec(g), controls, 1).sum(1).mean()
    return total


def rollout(net: TimeNetwork, u0, controls) -> torch.Tensor:
    """Predicted states at steps 1..n from ``u0`` under ``controls``."""
    return net.rollout(T.as_tensor(u0), T.as_tensor(controls))


# ---------------------------------------------------------------- estimators

def _predict_batches(fn, X: np.ndarray, batch: int = 256) -> np.ndarray:
    out = []
    with torch.no_grad():
        for s in range(0, len(X), batch):
            out.append(fn(T.as_tensor(X[s:s + batch])).numpy())
    return np.concatenate(out) if out else np.empty((0,) + X.shape[1:])


class OperatorSurrogate(BaseEstimator):
    """Convolutional autoencoder surrogate ``m -> (u, m~)`` for steady problems.

    Parameters
    ----------
    ndim : 1 or 2
    n : grid points per axis (divisible by 4)
    channels : encoder conv widths; decoders mirror them
    mode : ``"supervised"`` (fit needs states) or ``"residual"`` (data-free, Poisson)
    enforce_dirichlet : multiply predicted states by a mask vanishing on the boundary
    mask : ``"smooth"`` (product of parabolas) or ``"distance"`` (min distance)
    lambda_rec : weight of the control reconstruction loss
    latent_channels : channels of the 2D latent image
    lr, weight_decay, step_size, gamma, epochs, batch_size, seed : training setup
    """

    def __init__(self, ndim=2, n=64, channels=(16, 32, 32, 16), kernel_size=3,
                 activation="tanh", enforce_dirichlet=True, mode="supervised",
                 lambda_rec=1.5, lr=1e-3, weight_decay=1e-6, step_size=300, gamma=0.5,
                 epochs=900, batch_size=32, seed=0, latent_channels=4, mask="smooth"):
        self.ndim = ndim
        self.n = n
        self.channels = channels
        self.kernel_size = kernel_size
        self.activation = activation
        self.enforce_dirichlet = enforce_dirichlet
        self.mode = mode
        self.lambda_rec = lambda_rec
        self.lr = lr
        self.weight_decay = weight_decay
        self.step_size = step_size
        self.gamma = gamma
        self.epochs = epochs
        self.batch_size = batch_size
        self.seed = seed
        self.latent_channels = latent_channels
        self.mask = mask

    @property
    def grid(self) -> pde.Grid:
        return pde.Grid(self.ndim, self.n)

    def _build_network(self) -> SteadyNetwork:
        if self.mask not in pde.MASKS:
            raise ValueError(f"unknown mask {self.mask!r}; expected one of {sorted(pde.MASKS)}")
        mask = pde.MASKS[self.mask](self.grid) if self.enforce_dirichlet else None
        return SteadyNetwork(self.ndim, self.n, tuple(self.channels), self.kernel_size,
                             self.activation, mask=mask, seed=self.seed,
                             latent_channels=self.latent_channels)

    def train_config(self) -> TrainConfig:
        return TrainConfig(lr=self.lr, weight_decay=self.weight_decay, step_size=self.step_size,
                           factor=self.gamma, epochs=self.epochs, batch_size=self.batch_size,
                           seed=self.seed)

    def loss(self, net, m, u=None):
        return loss_total_phase1(net, m, u, self.mode, LossWeights(self.lambda_rec), self.ndim,
                                 h=self.grid.h)

    def fit(self, X, y=None, X_test=None, y_test=None, on_epoch=None):
        """Train on controls ``X`` (and states ``y`` in supervised mode).

        ``(X_test, y_test)`` labelled pairs select the best epoch by test
        relative error; this is allowed in residual mode too.
        """
        shape = self.grid.shape
        if self.mode == "supervised":
            if y is None:
                raise ValueError("supervised mode needs states y")
            X, y = check_pairs(X, y, shape)
            train = [T.as_tensor(X), T.as_tensor(y)]
        elif self.mode == "residual":
            if self.ndim != 2:
                raise ValueError("residual mode is available for the 2D Poisson problem only")
            X = check_fields(X, shape)
            train = [T.as_tensor(X)]
        else:
            raise ValueError(f"unknown mode {self.mode!r}")
        test = None
        if X_test is not None and y_test is not None:
            X_test, y_test = check_pairs(X_test, y_test, shape)
            test = [T.as_tensor(X_test), T.as_tensor(y_test)]
        net = self._build_network()
        net, hist = train_phase1(
            net, lambda nt, *b: self.loss(nt, *b), train, self.train_config(),
            metric_fn=lambda nt, m, u: relative_error(nt.solve(m), u, self.ndim).mean().item(),
            test=test, on_epoch=on_epoch)
        self.network_ = net
        self.history_ = hist
        return self

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "network_")
        X = check_fields(X, self.grid.shape, allow_single=True)
        single = X.ndim == self.ndim
        out = _predict_batches(self.network_.solve, X[None] if single else X)
        return out[0] if single else out

    def reconstruct(self, X) -> np.ndarray:
        check_is_fitted(self, "network_")
        X = check_fields(X, self.grid.shape, allow_single=True)
        single = X.ndim == self.ndim
        out = _predict_batches(self.network_.reconstruct, X[None] if single else X)
        return out[0] if single else out

    def transform(self, X) -> np.ndarray:
        """Latent codes of controls ``X``."""
        check_is_fitted(self, "network_")
        X = check_fields(X, self.grid.shape)
        return _predict_batches(self.network_.encode, X)

    def score(self, X, y) -> float:
        """Negative mean relative error of predicted states (higher is better)."""
        X, y = check_pairs(X, y, self.grid.shape)
        pred = self.predict(X)
        err = np.linalg.norm((pred - y).reshape(len(y), -1), axis=1) / np.linalg.norm(y.reshape(len(y), -1), axis=1)
        return -float(err.mean())


class TimeSurrogate(BaseEstimator):
    """Latent transition model ``(u^t, m^t) -> u^{t+Δt}`` on ``nx`` interior points."""

    def __init__(self, nx=128, channels=(32, 64, 32, 4), kernel_size=5, activation="tanh",
                 weights=(1.0, 1.5, 0.5, 1.0), lr=1e-3, weight_decay=1e-4, step_size=300,
                 gamma=0.5, epochs=300, batch_size=8, seed=0):
        self.nx = nx
        self.channels = channels
        self.kernel_size = kernel_size
        self.activation = activation
        self.weights = weights
        self.lr = lr
        self.weight_decay = weight_decay
        self.step_size = step_size
        self.gamma = gamma
        self.epochs = epochs
        self.batch_size = batch_size
        self.seed = seed

    def _build_network(self) -> TimeNetwork:
        return TimeNetwork(self.nx, tuple(self.channels), self.kernel_size, self.activation,
                           seed=self.seed)

    def train_config(self) -> TrainConfig:
        return TrainConfig(lr=self.lr, weight_decay=self.weight_decay, step_size=self.step_size,
                           factor=self.gamma, epochs=self.epochs, batch_size=self.batch_size,
                           seed=self.seed)

    def loss(self, net, states, controls):
        return loss_total_time_phase1(net, states, controls, LossWeights(time=tuple(self.weights)))

    def fit(self, X, y, X_test=None, y_test=None, on_epoch=None):
        """Train on control sequences ``X`` ``(N, n, nx)`` and state trajectories
        ``y`` ``(N, n+1, nx)``; the test metric is the mean one-step error."""
        X = check_fields(X, (self.nx,), extra_axes=2)
        y = check_fields(y, (self.nx,), extra_axes=2)
        if y.shape[:2] != (X.shape[0], X.shape[1] + 1):
            raise ValueError(f"states {y.shape} do not match controls {X.shape}")
        test = None
        if X_test is not None and y_test is not None:
            test = [T.as_tensor(check_fields(y_test, (self.nx,), extra_axes=2)),
                    T.as_tensor(check_fields(X_test, (self.nx,), extra_axes=2))]
        net = self._build_network()
        net, hist = train_phase1(
            net, lambda nt, u, m: self.loss(nt, u, m), [T.as_tensor(y), T.as_tensor(X)],
            self.train_config(), metric_fn=_one_step_error, test=test, on_epoch=on_epoch)
        self.network_ = net
        self.history_ = hist
        return self

    def predict_step(self, U, M) -> np.ndarray:
        check_is_fitted(self, "network_")
        with torch.no_grad():
            return self.network_.step(T.as_tensor(U), T.as_tensor(M)).numpy()

    def rollout(self, u0, controls) -> np.ndarray:
        check_is_fitted(self, "network_")
        with torch.no_grad():
            return rollout(self.network_, u0, controls).numpy()

    def one_step_error(self, X, y) -> float:
        check_is_fitted(self, "network_")
        with torch.no_grad():
            return _one_step_error(self.network_, T.as_tensor(y), T.as_tensor(X))

    def rollout_error(self, X, y) -> float:
        """Mean relative error of full rollouts against ``y[:, 1:]``."""
        pred = self.rollout(np.asarray(y)[:, 0], X)
        ref = np.asarray(y)[:, 1:]
        err = np.linalg.norm(pred - ref, axis=-1) / np.linalg.norm(ref, axis=-1)
        return float(err.mean())


def _one_step_error(net: TimeNetwork, states: torch.Tensor, controls: torch.Tensor) -> float:
    pred = net.step(states[:, :-1], controls)
    return relative_error(pred, states[:, 1:], 1).mean().item()
