"""Minimal feed-forward networks with exact analytic gradients.

Everything learnable in this package (policies, value functions, the
discriminator, and the simulation-parameter function) is built from the
same three pieces:

- ``MlpNet``: a tanh MLP with an identity output layer and hand-written
  backprop. Gradients are checked against central finite differences in
  the test suite.
- ``GaussianHead``: a concrete diagonal Gaussian distribution (mean and
  clamped log-std vectors) with reparameterized sampling and exact
  log-density plus its gradients.
- ``Adam``: a plain Adam optimizer over lists of parameter arrays.

Checkpoint format (JSON, see ``net_to_dict``):

    {"layer_sizes": [2, 64, 64, 1],
     "hidden_activation": "tanh",
     "weights": [[[...], ...], ...],   # one row-major (n_in, n_out) matrix per layer
     "biases": [[...], ...]}
"""

from __future__ import annotations

import math

import numpy as np

from .errors import ContractViolationError

LOG_SIGMA_MIN = -5.0
LOG_SIGMA_MAX = 2.0

LOG_2PI = math.log(2.0 * math.pi)


def clamp_log_sigma(raw: np.ndarray) -> np.ndarray:
    """Clamp raw log-std values into the allowed [-5, 2] band."""
    return np.clip(raw, LOG_SIGMA_MIN, LOG_SIGMA_MAX)


def log_sigma_grad_mask(raw: np.ndarray) -> np.ndarray:
    """1.0 where the clamp is inactive, 0.0 where it saturates."""
    return ((raw > LOG_SIGMA_MIN) & (raw < LOG_SIGMA_MAX)).astype(float)


class MlpNet:
    """Fully-connected network: tanh hidden layers, identity output.

    Weights are stored as (n_in, n_out) matrices so ``x @ W + b`` maps row
    vectors forward. Initialization is uniform fan-in: each weight is drawn
    from U(-1/sqrt(n_in), 1/sqrt(n_in)), biases start at zero, and the last
    layer's draw is multiplied by ``init_output_scale``. Given the same rng
    state the construction is bit-reproducible.
    """

    def __init__(self, layer_sizes, rng=None, init_output_scale: float = 1.0):
        sizes = [int(s) for s in layer_sizes]
        if len(sizes) < 2 or any(s <= 0 for s in sizes):
            raise ContractViolationError(f"invalid layer sizes {layer_sizes}")
        self.layer_sizes = sizes
        self.weights: list[np.ndarray] = []
        self.biases: list[np.ndarray] = []
        for i, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            bound = 1.0 / math.sqrt(n_in)
            if rng is None:
                w = np.zeros((n_in, n_out))
            else:
                w = rng.uniform(-bound, bound, size=(n_in, n_out))
            if i == len(sizes) - 2:
                w = w * init_output_scale
            self.weights.append(w)
            self.biases.append(np.zeros(n_out))
        self._cache: list[np.ndarray] | None = None
        self._cache_was_1d = False

    # -- parameter plumbing -------------------------------------------------

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    def params(self) -> list[np.ndarray]:
        """Live references, interleaved [W0, b0, W1, b1, ...]."""
        out: list[np.ndarray] = []
        for w, b in zip(self.weights, self.biases):
            out.append(w)
            out.append(b)
        return out

    def set_params(self, params: list[np.ndarray]) -> None:
        if len(params) != 2 * self.n_layers:
            raise ContractViolationError("parameter list length mismatch")
        for i in range(self.n_layers):
            self.weights[i] = np.array(params[2 * i], dtype=float)
            self.biases[i] = np.array(params[2 * i + 1], dtype=float)

    def copy(self) -> "MlpNet":
        other = MlpNet(self.layer_sizes)
        other.weights = [w.copy() for w in self.weights]
        other.biases = [b.copy() for b in self.biases]
        return other

    # -- forward / backward --------------------------------------------------

    def forward(self, x: np.ndarray) -> np.ndarray:
        """Run the network; caches activations for a later ``backward``.

        Accepts a single vector (d,) or a batch (N, d).
        """
        x = np.asarray(x, dtype=float)
        was_1d = x.ndim == 1
        if was_1d:
            x = x[None, :]
        if x.ndim != 2 or x.shape[1] != self.layer_sizes[0]:
            raise ContractViolationError(
                f"input shape {x.shape} does not match input size {self.layer_sizes[0]}"
            )
        acts = [x]
        h = x
        for i in range(self.n_layers):
            z = h @ self.weights[i] + self.biases[i]
            h = np.tanh(z) if i < self.n_layers - 1 else z
            acts.append(h)
        self._cache = acts
        self._cache_was_1d = was_1d
        return h[0] if was_1d else h

    def backward(self, loss_grad: np.ndarray) -> tuple[list[np.ndarray], np.ndarray]:
        """Backpropagate d(loss)/d(output) through the cached forward pass.

        Returns (grads, input_grad) where grads is interleaved like
        ``params()`` and sums over the batch (scale ``loss_grad`` by 1/N for
        a mean loss). ``input_grad`` has the shape of the forward input.
        """
        if self._cache is None:
            raise ContractViolationError("backward called before forward")
        g = np.asarray(loss_grad, dtype=float)
        if g.ndim == 1:
            g = g[None, :]
        acts = self._cache
        if g.shape != acts[-1].shape:
            raise ContractViolationError(
                f"loss grad shape {g.shape} does not match output shape {acts[-1].shape}"
            )
        grads: list[np.ndarray] = [np.empty(0)] * (2 * self.n_layers)
        delta = g
        for i in reversed(range(self.n_layers)):
            if i < self.n_layers - 1:
                delta = delta * (1.0 - acts[i + 1] ** 2)
            grads[2 * i] = acts[i].T @ delta
            grads[2 * i + 1] = delta.sum(axis=0)
            delta = delta @ self.weights[i].T
        return grads, (delta[0] if self._cache_was_1d else delta)

    def zero_grads(self) -> list[np.ndarray]:
        return [np.zeros_like(p) for p in self.params()]


class GaussianHead:
    """A concrete diagonal Gaussian over a real vector.

    ``log_sigma`` is clamped to [-5, 2] at construction so the density is
    never degenerate and the downstream likelihood ratios stay finite.
    """

    def __init__(self, mu: np.ndarray, log_sigma: np.ndarray):
        self.mu = np.asarray(mu, dtype=float)
        self.log_sigma = clamp_log_sigma(np.asarray(log_sigma, dtype=float))
        if self.mu.shape != self.log_sigma.shape:
            raise ContractViolationError("mu / log_sigma shape mismatch")

    @property
    def sigma(self) -> np.ndarray:
        return np.exp(self.log_sigma)

    def sample(self, rng) -> tuple[np.ndarray, float]:
        """Reparameterized draw: sample = mu + sigma * z, z ~ N(0, I).

        Returns (sample, log_prob) with log_prob the exact diagonal-Gaussian
        log-density at the sample.
        """
        z = rng.standard_normal(self.mu.shape)
        sample = self.mu + self.sigma * z
        return sample, self.log_prob(sample)

    def log_prob(self, x: np.ndarray) -> float:
        x = np.asarray(x, dtype=float)
        zs = (x - self.mu) / self.sigma
        return float(-0.5 * np.sum(zs**2) - np.sum(self.log_sigma) - 0.5 * LOG_2PI * x.size)

    def log_prob_grads(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """d log_prob / d mu and d log_prob / d log_sigma at x."""
        x = np.asarray(x, dtype=float)
        inv_var = np.exp(-2.0 * self.log_sigma)
        d_mu = (x - self.mu) * inv_var
        d_log_sigma = (x - self.mu) ** 2 * inv_var - 1.0
        return d_mu, d_log_sigma

    def entropy(self) -> float:
        return float(np.sum(self.log_sigma) + 0.5 * self.mu.size * (1.0 + LOG_2PI))


def gaussian_log_prob(mu: np.ndarray, log_sigma: np.ndarray, x: np.ndarray) -> float:
    """Standalone diagonal-Gaussian log-density (no clamping applied)."""
    mu = np.asarray(mu, dtype=float)
    log_sigma = np.asarray(log_sigma, dtype=float)
    x = np.asarray(x, dtype=float)
    zs = (x - mu) / np.exp(log_sigma)
    return float(-0.5 * np.sum(zs**2) - np.sum(log_sigma) - 0.5 * LOG_2PI * x.size)


def standard_normal_log_prob(z: np.ndarray) -> float:
    """Log-density of independent N(0, 1) draws."""
    z = np.asarray(z, dtype=float)
    return float(-0.5 * np.sum(z**2) - 0.5 * LOG_2PI * z.size)


class Adam:
    """Adam over a list of parameter arrays, updated in place."""

    def __init__(self, params: list[np.ndarray], lr: float = 3e-4,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]

    def step(self, params: list[np.ndarray], grads: list[np.ndarray]) -> None:
        if len(params) != len(self.m) or len(grads) != len(self.m):
            raise ContractViolationError("optimizer state does not match parameter list")
        self.t += 1
        b1t = 1.0 - self.beta1**self.t
        b2t = 1.0 - self.beta2**self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g**2
            p -= self.lr * (m / b1t) / (np.sqrt(v / b2t) + self.eps)


# -- checkpoints --------------------------------------------------------------


def net_to_dict(net: MlpNet) -> dict:
    return {
        "layer_sizes": list(net.layer_sizes),
        "hidden_activation": "tanh",
        "weights": [w.tolist() for w in net.weights],
        "biases": [b.tolist() for b in net.biases],
    }


def net_from_dict(d: dict) -> MlpNet:
    net = MlpNet(d["layer_sizes"])
    weights = [np.asarray(w, dtype=float) for w in d["weights"]]
    biases = [np.asarray(b, dtype=float) for b in d["biases"]]
    for i, (w, b) in enumerate(zip(weights, biases)):
        expect = (net.layer_sizes[i], net.layer_sizes[i + 1])
        if w.shape != expect or b.shape != (expect[1],):
            raise ContractViolationError(f"checkpoint layer {i} has shape {w.shape}, want {expect}")
    net.weights = weights
    net.biases = biases
    return net


# -- finite differences --------------------------------------------------------


def finite_difference_gradients(loss_fn, params: list[np.ndarray],
                                eps: float = 1e-5) -> list[np.ndarray]:
    """Central-difference gradient of ``loss_fn()`` w.r.t. each array.

    ``loss_fn`` must read the (mutated in place) arrays on every call. This
    is the reference oracle the analytic gradients are tested against.
    """
    grads = []
    for p in params:
        g = np.zeros_like(p)
        flat_p = p.ravel()
        flat_g = g.ravel()
        for i in range(flat_p.size):
            orig = flat_p[i]
            flat_p[i] = orig + eps
            hi = loss_fn()
            flat_p[i] = orig - eps
            lo = loss_fn()
            flat_p[i] = orig
            flat_g[i] = (hi - lo) / (2.0 * eps)
        grads.append(g)
    return grads


def max_relative_error(analytic: list[np.ndarray], numeric: list[np.ndarray]) -> float:
    """max |a - n| / max(1e-8, |a| + |n|) over all gradient entries."""
    worst = 0.0
    for a, n in zip(analytic, numeric):
        denom = np.maximum(1e-8, np.abs(a) + np.abs(n))
        worst = max(worst, float(np.max(np.abs(a - n) / denom)))
    return worst
