"""Small differentiable reconstruction networks and their training loop.

Three reconstruction pipelines share a residual 1D convolutional
enhancer (a scaled-down encoder/decoder with skip connections):

* ``postproc``       enhance(T y) with a fixed regularized inversion T
* ``fully_learned``  enhance(L y) with a learnable inversion initialized to T
* ``iterative``      K alternations of a data-consistency gradient step
                     and the (shared-weight) enhancer, started from T y

All forward passes run through the autodiff primitives, so the same code
yields plain evaluations, gradients with respect to measurements (for
perturbation search), and gradients with respect to parameters (for
training).  Measurement batches are column-stacked: (m,) or (m, B) in,
(N,) or (N, B) out.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .container import load_container, save_container
from .errors import ConfigurationError, ContractError, NumericalError, TrainingError
from .optim import adam_init, adam_step

__all__ = [
    "ConvBlockSpec",
    "UNet1d",
    "ReconNet",
    "TrainConfig",
    "Classifier",
    "dc_layer",
    "forward",
    "jitter_noise",
    "train",
    "classifier_train",
    "classifier_predict",
    "save_net",
    "load_net",
]


@dataclass(frozen=True)
class ConvBlockSpec:
    """Encoder/decoder layout; kernel 3, pooling 2, and ReLU are fixed."""

    levels: int = 3
    channels: tuple = (16, 32, 64)
    kernel: int = 3
    pool: int = 2

    def __post_init__(self):
        if self.kernel != 3 or self.pool != 2:
            raise ConfigurationError("kernel is fixed at 3 and pooling at 2")
        if len(self.channels) != self.levels:
            raise ConfigurationError("channels must list one count per level")
        if self.levels < 1:
            raise ConfigurationError("need at least one level")


def _he(rng, shape):
    fan_in = int(np.prod(shape[1:]))
    return rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)


class UNet1d:
    """Residual multi-level convolutional enhancer on (B, 1, L) signals.

    Two convolutions per level, max-pool downsampling, nearest-neighbour
    upsampling, skip concatenations, and a zero-initialized output
    convolution so the map is exactly the identity at initialization.
    Input lengths must be divisible by pool**(levels-1).
    """

    def __init__(self, spec=None, seed=0):
        self.spec = spec or ConvBlockSpec()
        self._params = {}
        rng = np.random.default_rng(seed)
        ch = self.spec.channels
        k = self.spec.kernel
        prev = 1
        for i, c in enumerate(ch):
            self._params[f"enc{i}a_w"] = _he(rng, (c, prev, k))
            self._params[f"enc{i}a_b"] = np.zeros(c)
            self._params[f"enc{i}b_w"] = _he(rng, (c, c, k))
            self._params[f"enc{i}b_b"] = np.zeros(c)
            prev = c
        for i in range(self.spec.levels - 2, -1, -1):
            cin = ch[i + 1] + ch[i]  # upsampled + skip
            c = ch[i]
            self._params[f"dec{i}a_w"] = _he(rng, (c, cin, k))
            self._params[f"dec{i}a_b"] = np.zeros(c)
            self._params[f"dec{i}b_w"] = _he(rng, (c, c, k))
            self._params[f"dec{i}b_b"] = np.zeros(c)
        self._params["out_w"] = np.zeros((1, ch[0], k))
        self._params["out_b"] = np.zeros(1)

    def params(self):
        return self._params

    def min_length(self):
        return self.spec.pool ** (self.spec.levels - 1)

    def forward(self, x, p=None):
        """Apply the enhancer; ``p`` overrides parameters (e.g. with Vars)."""
        p = p if p is not None else self._params
        levels = self.spec.levels
        skips = []
        h = x
        for i in range(levels):
            h = ad.relu(ad.conv1d(h, p[f"enc{i}a_w"], p[f"enc{i}a_b"]))
            h = ad.relu(ad.conv1d(h, p[f"enc{i}b_w"], p[f"enc{i}b_b"]))
            if i < levels - 1:
                skips.append(h)
                h = ad.maxpool1d(h, self.spec.pool)
        for i in range(levels - 2, -1, -1):
            h = ad.upsample1d(h, self.spec.pool)
            h = ad.concat(h, skips[i], axis=1)
            h = ad.relu(ad.conv1d(h, p[f"dec{i}a_w"], p[f"dec{i}a_b"]))
            h = ad.relu(ad.conv1d(h, p[f"dec{i}b_w"], p[f"dec{i}b_b"]))
        corr = ad.conv1d(h, p["out_w"], p["out_b"])
        return ad.add(x, corr)


def dc_layer(x, y, A, lam):
    """Data-consistency gradient step x - lam * A^T (A x - y).

    Leaves any x with A x = y unchanged; ``lam`` may be a scalar or a
    (learnable) tape variable.
    """
    residual = ad.sub(ad.matmul(A.matrix, x), y)
    return ad.sub(x, ad.mul(lam, ad.matmul(A.matrix.T, residual)))


def _to_images(x_cols, single):
    """(N,) or (N, B) column layout -> (B, 1, N) image layout."""
    if single:
        n = x_cols.shape[0] if isinstance(x_cols, np.ndarray) else x_cols.data.shape[0]
        return ad.reshape(x_cols, (1, 1, n))
    xt = ad.transpose2d(x_cols)
    b, n = (xt.shape if isinstance(xt, np.ndarray) else xt.data.shape)
    return ad.reshape(xt, (b, 1, n))


def _from_images(img, single):
    shape = img.shape if isinstance(img, np.ndarray) else img.data.shape
    b, _, n = shape
    if single:
        return ad.reshape(img, (n,))
    return ad.transpose2d(ad.reshape(img, (b, n)))


class ReconNet:
    """A measurement-to-signal map of one of the three pipeline kinds."""

    KINDS = ("postproc", "fully_learned", "iterative")

    def __init__(self, kind, A, inversion, spec=None, seed=0, K=8, dc_init=0.1):
        if kind not in self.KINDS:
            raise ConfigurationError(f"unknown kind {kind!r}")
        self.kind = kind
        self.A = A
        self.T = np.asarray(inversion.matrix if hasattr(inversion, "matrix") else inversion,
                            dtype=np.float64)
        if self.T.shape != (A.N, A.m):
            raise ContractError(f"inversion must be ({A.N}, {A.m}), got {self.T.shape}")
        self.enhancer = UNet1d(spec, seed=seed)
        self.K = int(K)
        self._own = {}
        if kind == "fully_learned":
            self._own["inv_L"] = self.T.copy()
        if kind == "iterative":
            self._own["dc_lams"] = np.full(self.K, float(dc_init))

    @property
    def m(self):
        return self.A.m

    @property
    def N(self):
        return self.A.N

    def params(self):
        out = dict(self._own)
        out.update(self.enhancer.params())
        return out

    def set_params(self, values):
        for name in self._own:
            self._own[name] = np.asarray(values[name], dtype=np.float64)
        enh = self.enhancer.params()
        for name in enh:
            enh[name] = np.asarray(values[name], dtype=np.float64)

    def forward(self, y, tape=None, p=None):
        """Reconstruct from measurements; records on ``tape`` if given.

        ``y`` may be a plain array, or a Var already attached to a tape;
        ``p`` optionally overrides parameters with tape variables for
        training.
        """
        if tape is not None and not isinstance(y, ad.Var):
            y = tape.var(y)
        p = p if p is not None else self.params()
        yshape = y.data.shape if isinstance(y, ad.Var) else np.shape(y)
        single = len(yshape) == 1
        inv = p["inv_L"] if self.kind == "fully_learned" else self.T
        x = ad.matmul(inv, y)
        if self.kind == "iterative":
            lams = p["dc_lams"]
            lam_row = ad.reshape(lams, (1, self.K)) if isinstance(lams, ad.Var) else None
            for k in range(self.K):
                img = _to_images(x, single)
                enhanced = _from_images(self.enhancer.forward(img, p), single)
                if lam_row is not None:
                    lam_k = ad.pick_rows(lam_row, np.array([k]))  # (1,) Var
                else:
                    lam_k = float(lams[k])
                x = dc_layer(enhanced, y, self.A, lam_k)
            return x
        img = _to_images(x, single)
        out = self.enhancer.forward(img, p)
        return _from_images(out, single)


def forward(net, y, tape=None):
    """Module-level alias for :meth:`ReconNet.forward`."""
    return net.forward(y, tape=tape)


def jitter_noise(m, jitter_bound, rng):
    """Measurement noise whose expected norm is uniform on [0, bound].

    Draws t ~ U[0, bound] and returns (t / sqrt(m)) g with standard
    normal g, so E|e| is t up to the (negligible for m >= 100)
    chi-versus-sqrt(m) correction.
    """
    if jitter_bound < 0:
        raise ContractError("jitter_bound must be >= 0")
    if jitter_bound == 0:
        return np.zeros(m)
    t = rng.uniform(0.0, jitter_bound)
    return (t / np.sqrt(m)) * rng.standard_normal(m)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    batch_size: int = 32
    lr: float = 1e-3
    weight_decay: float = 1e-5
    jitter_bound: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigurationError("epochs and batch_size must be >= 1")
        if self.lr < 0 or self.weight_decay < 0 or self.jitter_bound < 0:
            raise ConfigurationError("lr, weight_decay, jitter_bound must be >= 0")


def _train_steps(params, cfg, loss_and_grads, epochs_data):
    """Generic seeded mini-batch loop shared by both trainers."""
    states = {k: adam_init(v.shape, lr=cfg.lr) for k, v in params.items()}
    history = []
    for epoch, batches in epochs_data:
        epoch_losses = []
        for bi, batch in enumerate(batches):
            try:
                loss, grads = loss_and_grads(params, batch)
            except NumericalError as exc:
                raise TrainingError(
                    f"non-finite loss at epoch {epoch}, batch {bi}: {exc}"
                ) from exc
            if not np.isfinite(loss):
                raise TrainingError(f"non-finite loss at epoch {epoch}, batch {bi}")
            for name in params:
                params[name], states[name] = adam_step(
                    states[name], params[name], grads[name]
                )
            epoch_losses.append(loss)
        history.append(float(np.mean(epoch_losses)))
    return history


def train(net, signals, A, cfg):
    """Fit a reconstruction net on ground-truth signals by mini-batch descent.

    Minimizes the mean squared reconstruction error plus an L2 penalty
    ``weight_decay * |params|^2``.  Measurement noise is redrawn every
    epoch via :func:`jitter_noise` (``jitter_bound = 0`` reproduces
    noiseless training).  Deterministic for a fixed seed under
    single-threaded execution.  Returns the per-epoch loss history; the
    net is updated in place.
    """
    signals = np.asarray(signals, dtype=np.float64)
    M = signals.shape[0]
    rng = np.random.default_rng(cfg.seed)
    params = {k: v.copy() for k, v in net.params().items()}
    ybar = (A.matrix @ signals.T).T  # (M, m)

    def epochs_data():
        for epoch in range(cfg.epochs):
            noise = np.stack([jitter_noise(A.m, cfg.jitter_bound, rng) for _ in range(M)])
            y_all = ybar + noise
            perm = rng.permutation(M)
            batches = [
                perm[i : i + cfg.batch_size] for i in range(0, M, cfg.batch_size)
            ]
            yield epoch, [(y_all[idx], signals[idx]) for idx in batches]

    def loss_and_grads(params, batch):
        y_batch, x_batch = batch
        tape = ad.Tape()
        pvars = {k: tape.var(v) for k, v in params.items()}
        yv = tape.var(y_batch.T)  # columns
        xhat = net.forward(yv, p=pvars)
        err = ad.sumsq(ad.sub(xhat, x_batch.T))
        loss = ad.scale(err, 1.0 / y_batch.shape[0])
        if cfg.weight_decay > 0:
            penalty = None
            for pv in pvars.values():
                term = ad.sumsq(pv)
                penalty = term if penalty is None else ad.add(penalty, term)
            loss = ad.add(loss, ad.scale(penalty, cfg.weight_decay))
        grads_list = tape.gradient(loss, list(pvars.values()))
        grads = dict(zip(pvars.keys(), grads_list))
        value = float(loss.data)
        tape.release()
        return value, grads

    history = _train_steps(params, cfg, loss_and_grads, epochs_data())
    net.set_params(params)
    return history


# ---------------------------------------------------------------------------
# classification head for the compressed-classification study


class Classifier:
    """Small convolutional classifier on 1D signals -> class probabilities.

    Two convolution stages, global average pooling over positions, and
    a hidden dense layer before the class scores.  The global pooling
    gives position-invariant (count-like) channel features and the
    hidden nonlinearity matters for count-derived label functions such
    as the parity of the number of jumps, which are not linearly
    separable in the counts.
    """

    def __init__(self, length, n_classes, channels=(8, 16), hidden=32, seed=0):
        if length % 2 != 0:
            raise ConfigurationError("signal length must be even")
        self.length = int(length)
        self.n_classes = int(n_classes)
        self.channels = tuple(channels)
        self.hidden = int(hidden)
        rng = np.random.default_rng(seed)
        c1, c2 = self.channels
        self._params = {
            "conv1_w": _he(rng, (c1, 1, 3)),
            "conv1_b": np.zeros(c1),
            "conv2_w": _he(rng, (c2, c1, 3)),
            "conv2_b": np.zeros(c2),
            "hidden_w": rng.standard_normal((self.hidden, c2)) * np.sqrt(2.0 / c2),
            "hidden_b": np.zeros(self.hidden),
            # zero-initialized head: an untrained classifier is exactly uniform
            "dense_w": np.zeros((self.n_classes, self.hidden)),
            "dense_b": np.zeros(self.n_classes),
        }

    def params(self):
        return self._params

    def set_params(self, values):
        for name in self._params:
            self._params[name] = np.asarray(values[name], dtype=np.float64)

    def logits(self, x, p=None):
        """Class scores for signals in (N,) or (N, B) column layout."""
        p = p if p is not None else self._params
        shape = x.data.shape if isinstance(x, ad.Var) else np.shape(x)
        single = len(shape) == 1
        img = _to_images(x, single)
        h = ad.relu(ad.conv1d(img, p["conv1_w"], p["conv1_b"]))
        h = ad.maxpool1d(h, 2)
        h = ad.relu(ad.conv1d(h, p["conv2_w"], p["conv2_b"]))
        b = 1 if single else shape[1]
        c2 = self.channels[1]
        half = self.length // 2
        # global average pooling: (B, C2, L/2) -> (C2, B) channel means
        flat = ad.reshape(h, (b * c2, half))
        pooled = ad.reshape(ad.matmul(flat, np.full(half, 1.0 / half)), (b, c2))
        feats = ad.transpose2d(pooled)
        hid = ad.relu(ad.add(ad.matmul(p["hidden_w"], feats),
                             ad.reshape(p["hidden_b"], (-1, 1))))
        logits = ad.add(ad.matmul(p["dense_w"], hid), ad.reshape(p["dense_b"], (-1, 1)))
        return ad.transpose2d(logits)  # (B, K)

    def probabilities(self, x, p=None):
        return ad.vexp(ad.log_softmax(self.logits(x, p)))


def classifier_predict(clf, features):
    """Class probabilities for one signal or a column batch."""
    probs = clf.probabilities(np.asarray(features, dtype=np.float64))
    return probs[0] if np.ndim(features) == 1 else probs


def classifier_train(clf, features, labels, cfg):
    """Cross-entropy training of the classifier on labeled signals."""
    features = np.asarray(features, dtype=np.float64)
    if labels is None:
        raise ConfigurationError("classifier training requires labels")
    labels = np.asarray(labels, dtype=np.int64)
    if features.shape[0] != labels.shape[0]:
        raise ConfigurationError("features and labels must pair up")
    M = features.shape[0]
    rng = np.random.default_rng(cfg.seed)
    params = {k: v.copy() for k, v in clf.params().items()}

    def epochs_data():
        for epoch in range(cfg.epochs):
            perm = rng.permutation(M)
            batches = [
                perm[i : i + cfg.batch_size] for i in range(0, M, cfg.batch_size)
            ]
            yield epoch, [(features[idx], labels[idx]) for idx in batches]

    def loss_and_grads(params, batch):
        x_batch, y_batch = batch
        tape = ad.Tape()
        pvars = {k: tape.var(v) for k, v in params.items()}
        logits = clf.logits(x_batch.T, p=pvars)
        logp = ad.log_softmax(logits)
        nll = ad.scale(ad.vsum(ad.pick_rows(logp, y_batch)), -1.0 / x_batch.shape[0])
        if cfg.weight_decay > 0:
            penalty = None
            for pv in pvars.values():
                term = ad.sumsq(pv)
                penalty = term if penalty is None else ad.add(penalty, term)
            nll = ad.add(nll, ad.scale(penalty, cfg.weight_decay))
        grads_list = tape.gradient(nll, list(pvars.values()))
        value = float(nll.data)
        tape.release()
        return value, dict(zip(pvars.keys(), grads_list))

    history = _train_steps(params, cfg, loss_and_grads, epochs_data())
    clf.set_params(params)
    return history


# ---------------------------------------------------------------------------
# persistence


def save_net(path, net, meta=None):
    arrays = {"__T": net.T}
    arrays.update(net.params())
    info = {
        "kind": net.kind,
        "K": net.K,
        "levels": net.enhancer.spec.levels,
        "channels": list(net.enhancer.spec.channels),
        "m": net.m,
        "N": net.N,
    }
    info.update(meta or {})
    save_container(path, arrays, info)


def load_net(path, A):
    arrays, meta = load_container(path)
    spec = ConvBlockSpec(levels=meta["levels"], channels=tuple(meta["channels"]))
    net = ReconNet(meta["kind"], A, arrays.pop("__T"), spec=spec, K=meta["K"])
    net.set_params(arrays)
    return net
