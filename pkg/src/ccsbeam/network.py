"""Trainable beam-prediction pipeline.

The model is the measurement chain itself: a complex correlation layer whose
filter is the base phase-shift matrix, fixed subsampling at the shift set
Omega, optional per-subcarrier amplitude scaling, additive noise, and a
bias-free ReLU classifier over the N^2 beam classes.  All gradients are
hand-derived (checked against finite differences in the tests); training
uses SGD with momentum, and low-resolution phase shifters are honored by
projecting the filter onto the quantized constant-modulus set every
``quant_interval`` mini-batches.

Bias vectors do not exist anywhere in the model: together with ReLU this
makes the noise-free logits positively homogeneous in the channel, so beam
predictions are invariant to channel scaling.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from .channel import ChannelSample, Dataset
from .fileio import (
    DataFormatError,
    manifest_get,
    manifest_get_all,
    read_artifact,
    write_artifact,
)
from .sensing import (
    MeasurementOperator,
    SubsamplingSet,
    counter_rng,
    quantize_phase,
    sample_omega,
)

__all__ = [
    "ModelParams",
    "TrainConfig",
    "Gradients",
    "ForwardResult",
    "init_params",
    "forward",
    "forward_batch",
    "loss",
    "backward",
    "sgd_step",
    "pgd_project_filter",
    "project_subcarrier_weights",
    "train_stage1",
    "train_stage2",
    "predict_beam",
    "save_model",
    "load_model",
]

# counter-word tags so the independent random streams never collide
_CTR_INIT = 1
_CTR_NOISE = 2
_CTR_SHUFFLE = 3
_CTR_ROTATE = 4


@dataclass
class ModelParams:
    """All learnable state plus the fixed subsampling set."""

    n: int
    q: int | None
    stage: int
    n_sc: int
    p_r: np.ndarray
    p_i: np.ndarray
    fc: list[np.ndarray]          # weight matrices, shape (out, in), no biases
    omega_set: SubsamplingSet
    omega_conv: float
    seed: int
    fc_hidden: tuple[int, ...]
    p_raw: np.ndarray | None = None  # per-measurement scaling, wideband only

    @property
    def m(self) -> int:
        return self.omega_set.m

    @property
    def feature_dim(self) -> int:
        return 2 * self.m * self.n_sc

    def base_matrix(self) -> np.ndarray:
        return self.p_r + 1j * self.p_i

    def subcarrier_weights(self) -> np.ndarray:
        """Effective per-subcarrier amplitudes (block representatives)."""
        if self.p_raw is None:
            return np.ones(1)
        return self.p_raw.reshape(self.n_sc, self.m)[:, 0].copy()

    def operator(self) -> MeasurementOperator:
        op = self.__dict__.get("_op")
        if op is None:
            op = MeasurementOperator(self.omega_set)
            self.__dict__["_op"] = op
        return op

    def filter_hash(self) -> str:
        return hashlib.sha256(self.p_r.tobytes() + self.p_i.tobytes()).hexdigest()

    def copy(self) -> "ModelParams":
        return ModelParams(
            n=self.n,
            q=self.q,
            stage=self.stage,
            n_sc=self.n_sc,
            p_r=self.p_r.copy(),
            p_i=self.p_i.copy(),
            fc=[w.copy() for w in self.fc],
            omega_set=self.omega_set,
            omega_conv=self.omega_conv,
            seed=self.seed,
            fc_hidden=self.fc_hidden,
            p_raw=None if self.p_raw is None else self.p_raw.copy(),
        )


@dataclass(frozen=True)
class TrainConfig:
    stage: int
    epochs: int
    m: int = 40
    batch_size: int = 128
    lr: float = 1e-3
    lr_halve_every: int = 100
    momentum: float = 0.9
    quant_interval: int = 10       # mini-batches between filter projections
    q: int | None = None           # phase-shifter bits; None = unconstrained
    train_snr_db: float | None = None  # None = noise-free
    seed: int = 0
    fc_hidden: tuple[int, ...] = (80, 256, 512)
    # The receiver has no absolute carrier-phase reference and the best-beam
    # label is exactly invariant to a global phase on the channel, so each
    # training view gets a fresh uniform rotation.  Without it the classifier
    # memorizes (geometry, phase) pairs and generalizes several points worse.
    phase_rotation: bool = True

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be nonnegative")
        if self.quant_interval < 1:
            raise ValueError("quantization interval must be at least 1")

    def noise_var(self) -> float:
        if self.train_snr_db is None:
            return 0.0
        return 10.0 ** (-self.train_snr_db / 10.0)


@dataclass
class Gradients:
    d_p_r: np.ndarray | None
    d_p_i: np.ndarray | None
    d_fc: list[np.ndarray]
    d_p_raw: np.ndarray | None = None


@dataclass
class ForwardCache:
    params: ModelParams
    h_flat: np.ndarray        # (B, n_sc, N^2) complex
    y_clean: np.ndarray       # (B, n_sc, M) complex, before scaling/noise
    x: np.ndarray             # (B, 2*M*n_sc) feature vectors
    preacts: list[np.ndarray]
    acts: list[np.ndarray]
    probs: np.ndarray


@dataclass
class ForwardResult:
    probs: np.ndarray
    logits: np.ndarray
    cache: ForwardCache


def init_params(
    n: int,
    m: int,
    seed: int,
    n_sc: int = 1,
    q: int | None = None,
    fc_hidden: tuple[int, ...] = (80, 256, 512),
) -> ModelParams:
    """Fresh model: uniform random filter phases at constant modulus 1/N,
    He-initialized classifier, uniform subcarrier power."""
    omega_set = sample_omega(n, m, seed)
    rng = counter_rng(seed, _CTR_INIT)
    phases = rng.uniform(0.0, 2.0 * np.pi, size=(n, n))
    p0 = np.exp(1j * phases) / n
    dims = (2 * m * n_sc,) + tuple(fc_hidden) + (n * n,)
    fc = [
        rng.standard_normal((dims[i + 1], dims[i])) * np.sqrt(2.0 / dims[i])
        for i in range(len(dims) - 1)
    ]
    p_raw = None
    if n_sc > 1:
        p_raw = np.full(n_sc * m, 1.0 / np.sqrt(n_sc))
    return ModelParams(
        n=n,
        q=q,
        stage=1,
        n_sc=n_sc,
        p_r=p0.real.copy(),
        p_i=p0.imag.copy(),
        fc=fc,
        omega_set=omega_set,
        omega_conv=float(np.linalg.norm(p0)),
        seed=seed,
        fc_hidden=tuple(fc_hidden),
        p_raw=p_raw,
    )


def _softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def forward_batch(
    channels: np.ndarray,
    params: ModelParams,
    noise_var: float = 0.0,
    rng: np.random.Generator | None = None,
) -> ForwardResult:
    """Run the full pipeline on a (B, n_sc, N, N) channel batch."""
    channels = np.asarray(channels, dtype=np.complex128)
    if channels.ndim != 4 or channels.shape[1] != params.n_sc or channels.shape[2:] != (
        params.n,
        params.n,
    ):
        raise ValueError(
            f"expected channel batch (B, {params.n_sc}, {params.n}, {params.n}), "
            f"got {channels.shape}"
        )
    b = channels.shape[0]
    h_flat = channels.reshape(b, params.n_sc, -1)
    s = params.operator().sensing_matrix(params.base_matrix())
    y_clean = h_flat @ s  # (B, n_sc, M)
    y = y_clean
    if params.p_raw is not None:
        y = y * params.p_raw.reshape(params.n_sc, params.m)[None]
    if noise_var > 0.0:
        if rng is None:
            raise ValueError("noise draws need an explicit generator")
        scale = np.sqrt(noise_var / 2.0)
        y = y + scale * (
            rng.standard_normal(y.shape) + 1j * rng.standard_normal(y.shape)
        )
    x = np.concatenate([y.reshape(b, -1).real, y.reshape(b, -1).imag], axis=1)

    act = x
    preacts, acts = [], []
    for w in params.fc[:-1]:
        z = act @ w.T
        preacts.append(z)
        act = np.maximum(z, 0.0)
        acts.append(act)
    logits = act @ params.fc[-1].T
    probs = _softmax(logits)
    cache = ForwardCache(
        params=params, h_flat=h_flat, y_clean=y_clean, x=x, preacts=preacts, acts=acts,
        probs=probs,
    )
    return ForwardResult(probs=probs, logits=logits, cache=cache)


def forward(
    sample: ChannelSample | np.ndarray,
    params: ModelParams,
    noise_var: float = 0.0,
    seed: int = 0,
) -> ForwardResult:
    """Single-sample forward pass; returns class probabilities over N^2 beams."""
    chan = sample.channel if isinstance(sample, ChannelSample) else np.asarray(sample)
    if chan.ndim == 2:
        chan = chan[None]
    rng = counter_rng(seed, _CTR_NOISE) if noise_var > 0 else None
    res = forward_batch(chan[None], params, noise_var, rng)
    return ForwardResult(probs=res.probs[0], logits=res.logits[0], cache=res.cache)


_LOSS_CLAMP = 1e-12


def loss(probs: np.ndarray, labels: np.ndarray) -> float:
    """Mean cross-entropy (nats) between predicted rows and integer labels.

    Probabilities below 1e-12 at the true label are clamped before the log.
    """
    probs = np.atleast_2d(probs)
    labels = np.atleast_1d(labels)
    picked = probs[np.arange(len(labels)), labels]
    return float(np.mean(-np.log(np.maximum(picked, _LOSS_CLAMP))))


def clamped_count(probs: np.ndarray, labels: np.ndarray) -> int:
    """How many true-label probabilities fell below the loss clamp."""
    probs = np.atleast_2d(probs)
    labels = np.atleast_1d(labels)
    return int(np.sum(probs[np.arange(len(labels)), labels] < _LOSS_CLAMP))


def backward(cache: ForwardCache, labels: np.ndarray) -> Gradients:
    """Analytic gradients of the mean cross-entropy for every parameter group."""
    params = cache.params
    labels = np.atleast_1d(labels)
    b = cache.probs.shape[0]
    delta = cache.probs.copy()
    delta[np.arange(b), labels] -= 1.0
    delta /= b

    d_fc: list[np.ndarray] = [None] * len(params.fc)
    grad = delta
    for li in range(len(params.fc) - 1, 0, -1):
        d_fc[li] = grad.T @ cache.acts[li - 1]
        grad = (grad @ params.fc[li]) * (cache.preacts[li - 1] > 0)
    d_fc[0] = grad.T @ cache.x
    d_x = grad @ params.fc[0]

    half = params.m * params.n_sc
    g_y = (d_x[:, :half] + 1j * d_x[:, half:]).reshape(b, params.n_sc, params.m)

    d_p_raw = None
    if params.p_raw is not None:
        d_p_raw = np.real(np.conj(g_y) * cache.y_clean).sum(axis=0).ravel()
        g_y = g_y * params.p_raw.reshape(params.n_sc, params.m)[None]

    # A[j] = sum_{b,s,m} conj(g_y) * H[b, s, inv_m(j)]
    c = np.einsum("bsi,bsm->im", cache.h_flat, np.conj(g_y))
    a = params.operator().filter_grad(c).reshape(params.n, params.n)
    return Gradients(d_p_r=a.real, d_p_i=a.imag, d_fc=d_fc, d_p_raw=d_p_raw)


def sgd_step(
    params: ModelParams,
    grads: Gradients,
    lr: float,
    momentum: float = 0.0,
    velocity: dict | None = None,
) -> ModelParams:
    """In-place (momentum) SGD update; gradient entries set to None are frozen."""
    if lr < 0:
        raise ValueError("learning rate must be nonnegative")

    def upd(key, value, grad):
        if grad is None:
            return
        if momentum > 0.0 and velocity is not None:
            v = velocity.setdefault(key, np.zeros_like(value))
            v *= momentum
            v += grad
            value -= lr * v
        else:
            value -= lr * grad

    upd("p_r", params.p_r, grads.d_p_r)
    upd("p_i", params.p_i, grads.d_p_i)
    for i, (w, g) in enumerate(zip(params.fc, grads.d_fc)):
        upd(f"fc{i}", w, g)
    if params.p_raw is not None:
        upd("p_raw", params.p_raw, grads.d_p_raw)
    return params


def pgd_project_filter(params: ModelParams, q: int, omega_conv: float) -> ModelParams:
    """Project the filter onto the feasible set: phases on the 2^q grid and
    every entry at modulus omega_conv/N, so the Frobenius norm stays frozen."""
    if omega_conv <= 0:
        raise ValueError("frozen norm must be positive")
    w = params.base_matrix()
    projected = omega_conv * quantize_phase(w, q) / params.n
    params.p_r = projected.real.copy()
    params.p_i = projected.imag.copy()
    return params


def project_subcarrier_weights(p_raw: np.ndarray, n_sc: int) -> np.ndarray:
    """Per-subcarrier amplitude budget from raw per-measurement weights.

    Each contiguous block of p_raw (one block per subcarrier) collapses to the
    mean of its absolute values; the resulting length-n_sc vector is then
    renormalized so the squared amplitudes sum to one.
    """
    p_raw = np.asarray(p_raw, dtype=np.float64)
    if p_raw.size % n_sc != 0:
        raise ValueError(f"weight vector length {p_raw.size} not divisible by {n_sc}")
    block_means = np.abs(p_raw).reshape(n_sc, -1).mean(axis=1)
    norm = np.linalg.norm(block_means)
    if norm == 0:
        raise ValueError("all-zero subcarrier weights cannot be normalized")
    return block_means / norm


def predict_beam(y: np.ndarray, params: ModelParams) -> tuple[int, int]:
    """Best-beam prediction from a measurement vector (classifier only)."""
    y = np.asarray(getattr(y, "y", y)).ravel()
    if len(y) != params.m * params.n_sc:
        raise ValueError(
            f"measurement length {len(y)} does not match model "
            f"(M={params.m}, n_sc={params.n_sc})"
        )
    x = np.concatenate([y.real, y.imag])
    act = x
    for w in params.fc[:-1]:
        act = np.maximum(act @ w.T, 0.0)
    logits = act @ params.fc[-1].T
    idx = int(np.argmax(logits))
    return idx // params.n, idx % params.n


def _epoch_order(seed: int, epoch: int, count: int) -> np.ndarray:
    return counter_rng(seed, _CTR_SHUFFLE, epoch).permutation(count)


def _apply_p_projection(params: ModelParams) -> None:
    p = project_subcarrier_weights(params.p_raw, params.n_sc)
    params.p_raw = np.repeat(p, params.m)


def _run_training(
    dataset: Dataset,
    config: TrainConfig,
    params: ModelParams,
    noise_var: float,
    train_filter: bool,
    on_epoch=None,
    on_project=None,
) -> ModelParams:
    labels = dataset.labels
    velocity: dict = {}
    step = 0
    for epoch in range(config.epochs):
        lr = config.lr * 0.5 ** (epoch // config.lr_halve_every)
        order = _epoch_order(config.seed, epoch, dataset.count)
        epoch_losses = []
        for start in range(0, dataset.count, config.batch_size):
            batch = order[start : start + config.batch_size]
            if train_filter and config.q is not None and step % config.quant_interval == 0:
                pgd_project_filter(params, config.q, params.omega_conv)
                if on_project is not None:
                    on_project(step, params)
            chans = dataset.channels[batch]
            if config.phase_rotation:
                rot = counter_rng(config.seed, _CTR_ROTATE, epoch, step)
                phases = np.exp(1j * rot.uniform(0.0, 2.0 * np.pi, size=len(batch)))
                chans = chans * phases[:, None, None, None]
            rng = counter_rng(config.seed, _CTR_NOISE, epoch, step) if noise_var > 0 else None
            res = forward_batch(chans, params, noise_var, rng)
            epoch_losses.append(loss(res.probs, labels[batch]))
            grads = backward(res.cache, labels[batch])
            if not train_filter:
                grads.d_p_r = None
                grads.d_p_i = None
                grads.d_p_raw = None
            sgd_step(params, grads, lr, config.momentum, velocity)
            if train_filter and params.p_raw is not None:
                _apply_p_projection(params)
                if on_project is not None:
                    on_project(step, params)
            step += 1
        if on_epoch is not None:
            on_epoch(epoch, float(np.mean(epoch_losses)))
    return params


def train_stage1(
    dataset: Dataset,
    config: TrainConfig,
    on_epoch=None,
    on_project=None,
) -> ModelParams:
    """Mask-optimization stage: per-sample unit-power channels, no noise,
    filter and classifier trained jointly under the phase constraints.

    The returned filter is projected (for finite q) and rescaled to
    Frobenius norm N, the per-shifter power convention used at deployment.
    """
    if dataset.normalization != "stage1":
        raise ValueError(
            f"stage-1 training expects normalize_stage1 data, got {dataset.normalization!r}"
        )
    if config.train_snr_db is not None:
        raise ValueError("stage-1 training is noise-free; train_snr_db must be unset")
    params = init_params(
        n=dataset.n,
        m=config.m,
        seed=config.seed,
        n_sc=dataset.n_sc,
        q=config.q,
        fc_hidden=config.fc_hidden,
    )
    params = _run_training(
        dataset, config, params, noise_var=0.0, train_filter=True,
        on_epoch=on_epoch, on_project=on_project,
    )
    if config.q is not None:
        pgd_project_filter(params, config.q, params.omega_conv)
    w = params.base_matrix()
    scale = params.n / np.linalg.norm(w)
    params.p_r = (w * scale).real.copy()
    params.p_i = (w * scale).imag.copy()
    params.omega_conv = float(np.linalg.norm(w * scale))
    # compensate in the (bias-free, linear) input layer so the end-to-end
    # classifier is unchanged by the deployment rescaling
    params.fc[0] = params.fc[0] / scale
    return params


def train_stage2(
    dataset: Dataset,
    config: TrainConfig,
    stage1_params: ModelParams,
    on_epoch=None,
) -> ModelParams:
    """Beam-alignment stage: the filter (and subcarrier budget) from stage 1
    stay frozen byte-for-byte; only the classifier adapts to realistic
    channel powers and the training-SNR noise level."""
    if stage1_params is None:
        raise ValueError("stage-2 training needs the stage-1 model")
    if dataset.normalization != "eval":
        raise ValueError(
            f"stage-2 training expects normalize_eval data, got {dataset.normalization!r}"
        )
    if dataset.n != stage1_params.n or dataset.n_sc != stage1_params.n_sc:
        raise ValueError("dataset dimensions do not match the stage-1 model")
    params = stage1_params.copy()
    params.stage = 2
    params.seed = config.seed
    params = _run_training(
        dataset, config, params, noise_var=config.noise_var(), train_filter=False,
        on_epoch=on_epoch,
    )
    return params


def save_model(
    params: ModelParams, path: str, extra_manifest: list[tuple[str, str]] | None = None
) -> None:
    manifest = [
        ("format", "ccsbeam-model/1"),
        ("n", str(params.n)),
        ("m", str(params.m)),
        ("q", "inf" if params.q is None else str(params.q)),
        ("stage", str(params.stage)),
        ("n_sc", str(params.n_sc)),
        ("fc_hidden", ",".join(str(d) for d in params.fc_hidden)),
        ("omega_conv", repr(params.omega_conv)),
        ("seed", str(params.seed)),
    ]
    manifest.extend(("omega", line) for line in params.omega_set.serialize())
    if extra_manifest:
        manifest.extend(extra_manifest)
    arrays = [params.p_r, params.p_i, *params.fc]
    if params.p_raw is not None:
        arrays.append(params.p_raw)
    payload = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for a in arrays)
    write_artifact(path, manifest, payload)


def load_model(path: str) -> ModelParams:
    manifest, payload = read_artifact(path)
    if manifest_get(manifest, "format") != "ccsbeam-model/1":
        raise DataFormatError(f"{path}: not a ccsbeam model")
    n = int(manifest_get(manifest, "n"))
    m = int(manifest_get(manifest, "m"))
    q_str = manifest_get(manifest, "q")
    n_sc = int(manifest_get(manifest, "n_sc"))
    fc_hidden = tuple(int(d) for d in manifest_get(manifest, "fc_hidden").split(","))
    omega_set = SubsamplingSet.deserialize(n, manifest_get_all(manifest, "omega"))
    if omega_set.m != m:
        raise DataFormatError(f"{path}: omega length {omega_set.m} != m {m}")

    dims = (2 * m * n_sc,) + fc_hidden + (n * n,)
    shapes = [(n, n), (n, n)] + [(dims[i + 1], dims[i]) for i in range(len(dims) - 1)]
    if n_sc > 1:
        shapes.append((n_sc * m,))
    expected = sum(int(np.prod(s)) for s in shapes) * 8
    if len(payload) != expected:
        raise DataFormatError(f"{path}: payload size {len(payload)} != expected {expected}")
    arrays = []
    offset = 0
    for shape in shapes:
        size = int(np.prod(shape)) * 8
        arrays.append(
            np.frombuffer(payload[offset : offset + size], dtype="<f8").reshape(shape).copy()
        )
        offset += size
    p_r, p_i, *rest = arrays
    p_raw = rest.pop() if n_sc > 1 else None
    return ModelParams(
        n=n,
        q=None if q_str == "inf" else int(q_str),
        stage=int(manifest_get(manifest, "stage")),
        n_sc=n_sc,
        p_r=p_r,
        p_i=p_i,
        fc=rest,
        omega_set=omega_set,
        omega_conv=float(manifest_get(manifest, "omega_conv")),
        seed=int(manifest_get(manifest, "seed")),
        fc_hidden=fc_hidden,
        p_raw=p_raw,
    )
