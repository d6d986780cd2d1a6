"""Feature fusion classifier and its training loop.

Active shallow and text features are concatenated and pushed through a
four-layer MLP (512, 256, 128, 64, rectifiers between layers); the MLP
output is concatenated with the SE-gated deep feature and a single linear
head produces logits over the five categories. When the deep branch is
masked off the SE gate is dropped too; when both shallow and text are off
the MLP is omitted and the head consumes the gated deep feature directly.

All arithmetic is float64 numpy; training is plain mini-batch Adam on mean
cross-entropy, deterministic for a fixed seed.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nn
from .categories import NUM_CATEGORIES, Category
from .dvfe import SEBlock, se_gate_backward, se_gate_forward
from .errors import (
    CompatibilityError,
    ConfigurationError,
    DataError,
    DivergenceError,
    InputError,
    ShapeError,
)

MLP_WIDTHS = (512, 256, 128, 64)
SHALLOW_LENGTH = 256
MASK_NAMES = ("dvfe", "svfe", "tfe")
MODEL_FORMAT_VERSION = 1

FULL_MASK = frozenset(MASK_NAMES)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.001
    batch_size: int = 64
    epochs: int = 20
    seed: int = 0
    class_weights: bool = False
    weight_decay: float = 0.0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ConfigurationError(f"learning rate must be positive, got {self.learning_rate}")
        if self.batch_size < 1 or self.epochs < 1:
            raise ConfigurationError("batch_size and epochs must be at least 1")


@dataclass
class FeatureBundle:
    """Per-block features; any subset may be present, labels optional.

    deep is the pooled pre-gate backbone vector (length C), shallow the
    256-bin histogram, text the TF-IDF vector (length V).
    """

    deep: np.ndarray | None = None
    shallow: np.ndarray | None = None
    text: np.ndarray | None = None
    label: Category | None = None

    def __post_init__(self):
        if self.deep is None and self.shallow is None and self.text is None:
            raise InputError("feature bundle must carry at least one feature")


@dataclass(frozen=True)
class Prediction:
    category: Category
    probabilities: np.ndarray


def normalize_mask(mask) -> frozenset[str]:
    names = frozenset(str(m).lower() for m in mask)
    unknown = names - set(MASK_NAMES)
    if unknown:
        raise ConfigurationError(f"unknown extractor names in mask: {sorted(unknown)}")
    if not names:
        raise ConfigurationError("ablation mask must enable at least one extractor")
    return names


@dataclass
class FusionModel:
    mask: frozenset[str]
    channels: int  # C; 0 when the deep branch is off
    vocab_size: int  # V; 0 when the text branch is off
    params: dict[str, np.ndarray]
    config_fingerprint: str | None = None
    se: SEBlock | None = field(init=False, default=None)

    def __post_init__(self):
        if "dvfe" in self.mask:
            self.se = SEBlock(
                w1=self.params["se.w1"], b1=self.params["se.b1"],
                w2=self.params["se.w2"], b2=self.params["se.b2"])

    @property
    def mlp_input_width(self) -> int:
        return SHALLOW_LENGTH * ("svfe" in self.mask) + self.vocab_size * ("tfe" in self.mask)

    @property
    def head_input_width(self) -> int:
        if self.mlp_input_width == 0:
            return self.channels
        return MLP_WIDTHS[-1] + ("dvfe" in self.mask) * self.channels


def _param_shapes(mask, channels: int, vocab_size: int, se_hidden: int) -> dict[str, tuple]:
    """Parameter tensor shapes implied by the wiring; weight fan-in is shape[1]."""
    shapes: dict[str, tuple] = {}
    mlp_in = SHALLOW_LENGTH * ("svfe" in mask) + vocab_size * ("tfe" in mask)
    width_in = mlp_in
    if mlp_in > 0:
        for i, width in enumerate(MLP_WIDTHS):
            shapes[f"mlp.{i}.w"] = (width, width_in)
            shapes[f"mlp.{i}.b"] = (width,)
            width_in = width
        head_in = MLP_WIDTHS[-1] + channels
    else:
        head_in = channels
    shapes["head.w"] = (NUM_CATEGORIES, head_in)
    shapes["head.b"] = (NUM_CATEGORIES,)
    if "dvfe" in mask:
        shapes["se.w1"] = (se_hidden, channels)
        shapes["se.b1"] = (se_hidden,)
        shapes["se.w2"] = (channels, se_hidden)
        shapes["se.b2"] = (channels,)
    return shapes


def build_model(mask, channels: int = 0, vocab_size: int = 0, seed: int = 0,
                se_ratio: int = 16) -> FusionModel:
    """Create a fusion model with deterministic uniform fan-in init."""
    mask = normalize_mask(mask)
    if "dvfe" in mask and channels <= 0:
        raise ConfigurationError("deep branch enabled but channel count is not positive")
    if "tfe" in mask and vocab_size <= 0:
        raise ConfigurationError("text branch enabled but vocabulary size is not positive")
    channels = channels if "dvfe" in mask else 0
    vocab_size = vocab_size if "tfe" in mask else 0
    if "dvfe" in mask and channels % se_ratio != 0:
        raise ConfigurationError(f"SE ratio {se_ratio} does not divide channel count {channels}")
    se_hidden = channels // se_ratio if "dvfe" in mask else 0

    rng = np.random.default_rng([seed, 0xF5])
    params: dict[str, np.ndarray] = {}
    for name, shape in _param_shapes(mask, channels, vocab_size, se_hidden).items():
        if name.rsplit(".", 1)[-1].startswith("b"):
            params[name] = np.zeros(shape)
        else:
            params[name] = nn.uniform_fan_in(rng, shape, shape[1])
    return FusionModel(mask=mask, channels=channels, vocab_size=vocab_size, params=params)


# ---------------------------------------------------------------------------
# Forward / backward

def _bundle_arrays(model: FusionModel, bundles: list[FeatureBundle], need_labels: bool):
    """Stack the active features of many bundles into dense batches."""
    n = len(bundles)
    Z = S = T = None
    if "dvfe" in model.mask:
        Z = np.empty((n, model.channels))
    if "svfe" in model.mask:
        S = np.empty((n, SHALLOW_LENGTH))
    if "tfe" in model.mask:
        T = np.empty((n, model.vocab_size))
    y = np.empty(n, dtype=np.int64) if need_labels else None
    for i, b in enumerate(bundles):
        for name, arr, width, out in (
            ("dvfe", b.deep, model.channels, Z),
            ("svfe", b.shallow, SHALLOW_LENGTH, S),
            ("tfe", b.text, model.vocab_size, T),
        ):
            if name not in model.mask:
                continue
            if arr is None:
                raise InputError(f"bundle {i} is missing the {name} feature required by the mask")
            if arr.shape != (width,):
                raise ShapeError(f"bundle {i}: {name} feature has shape {arr.shape}, expected ({width},)")
            out[i] = arr
        if need_labels:
            if b.label is None:
                raise DataError(f"bundle {i} is unlabeled; training requires labels")
            y[i] = int(b.label)
    return Z, S, T, y


def _forward_batch(model: FusionModel, Z, S, T):
    """Returns (logits, cache) for a batch of stacked features."""
    cache: dict = {}
    p = model.params
    mlp_parts = [a for a in (S, T) if a is not None]
    h = None
    if mlp_parts:
        x = np.concatenate(mlp_parts, axis=1)
        cache["mlp_in"] = x
        pre, post = [], []
        h = x
        for i in range(len(MLP_WIDTHS)):
            a = h @ p[f"mlp.{i}.w"].T + p[f"mlp.{i}.b"]
            pre.append(a)
            h = nn.relu(a) if i < len(MLP_WIDTHS) - 1 else a
            post.append(h)
        cache["mlp_pre"] = pre
        cache["mlp_post"] = post
    deep_out = None
    if Z is not None:
        deep_out, se_cache = se_gate_forward(Z, model.se)
        cache["se"] = se_cache
    head_parts = [a for a in (h, deep_out) if a is not None]
    head_in = np.concatenate(head_parts, axis=1) if len(head_parts) > 1 else head_parts[0]
    cache["head_in"] = head_in
    cache["h_width"] = 0 if h is None else h.shape[1]
    logits = head_in @ p["head.w"].T + p["head.b"]
    return logits, cache


def _log_softmax(logits):
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def _loss_and_grads(model: FusionModel, Z, S, T, y, sample_weights=None):
    n = y.shape[0]
    logits, cache = _forward_batch(model, Z, S, T)
    logp = _log_softmax(logits)
    if sample_weights is None:
        sample_weights = np.ones(n)
    total_weight = sample_weights.sum()
    loss = -(sample_weights * logp[np.arange(n), y]).sum() / total_weight

    probs = np.exp(logp)
    dlogits = probs.copy()
    dlogits[np.arange(n), y] -= 1.0
    dlogits *= (sample_weights / total_weight)[:, None]

    p = model.params
    grads: dict[str, np.ndarray] = {
        "head.w": dlogits.T @ cache["head_in"],
        "head.b": dlogits.sum(axis=0),
    }
    dhead_in = dlogits @ p["head.w"]
    hw = cache["h_width"]
    dh = dhead_in[:, :hw] if hw else None
    ddeep = dhead_in[:, hw:] if Z is not None else None

    if dh is not None:
        upstream = dh
        for i in reversed(range(len(MLP_WIDTHS))):
            if i < len(MLP_WIDTHS) - 1:
                upstream = upstream * (cache["mlp_pre"][i] > 0)
            src = cache["mlp_post"][i - 1] if i > 0 else cache["mlp_in"]
            grads[f"mlp.{i}.w"] = upstream.T @ src
            grads[f"mlp.{i}.b"] = upstream.sum(axis=0)
            upstream = upstream @ p[f"mlp.{i}.w"]
    if ddeep is not None:
        _, se_grads = se_gate_backward(ddeep, cache["se"], model.se)
        grads.update(se_grads)
    return loss, grads


def forward(model: FusionModel, bundle: FeatureBundle, logit_offset: float = 0.0) -> Prediction:
    """Classify one feature bundle.

    logit_offset is a test hook: softmax is shift-invariant, so any constant
    added to all five logits must leave the probabilities unchanged.
    """
    Z, S, T, _ = _bundle_arrays(model, [bundle], need_labels=False)
    logits, _ = _forward_batch(model, Z, S, T)
    probs = nn.softmax(logits + logit_offset)[0]
    return Prediction(category=Category(int(np.argmax(probs))), probabilities=probs)


def predict_batch(model: FusionModel, bundles: list[FeatureBundle]) -> list[Prediction]:
    Z, S, T, _ = _bundle_arrays(model, bundles, need_labels=False)
    probs = nn.softmax(_forward_batch(model, Z, S, T)[0])
    return [Prediction(category=Category(int(np.argmax(row))), probabilities=row) for row in probs]


# ---------------------------------------------------------------------------
# Training

def _class_weights(y: np.ndarray) -> np.ndarray:
    counts = np.bincount(y, minlength=NUM_CATEGORIES).astype(np.float64)
    present = counts > 0
    weights = np.zeros(NUM_CATEGORIES)
    weights[present] = y.shape[0] / (present.sum() * counts[present])
    return weights


def train(model: FusionModel, dataset: list[FeatureBundle], cfg: TrainConfig):
    """Minimize mean cross-entropy with Adam; returns (model, loss_trace).

    The model is updated in place; loss_trace holds one mean training loss
    per epoch. Runs are deterministic for a fixed seed.
    """
    if not dataset:
        raise DataError("training dataset is empty")
    Z, S, T, y = _bundle_arrays(model, dataset, need_labels=True)
    n = y.shape[0]
    per_class = _class_weights(y) if cfg.class_weights else None
    optimizer = nn.Adam(model.params, lr=cfg.learning_rate, weight_decay=cfg.weight_decay)
    rng = np.random.default_rng([cfg.seed, 0x7a])
    trace: list[float] = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        epoch_loss = 0.0
        for batch_idx, start in enumerate(range(0, n, cfg.batch_size)):
            sel = order[start:start + cfg.batch_size]
            weights = per_class[y[sel]] if per_class is not None else None
            loss, grads = _loss_and_grads(
                model,
                None if Z is None else Z[sel],
                None if S is None else S[sel],
                None if T is None else T[sel],
                y[sel],
                sample_weights=weights,
            )
            if not np.isfinite(loss):
                raise DivergenceError(
                    f"non-finite training loss at epoch {epoch}, batch {batch_idx}",
                    batch_index=batch_idx)
            optimizer.step(grads)
            epoch_loss += loss * len(sel)
        trace.append(float(epoch_loss / n))
    return model, trace


# ---------------------------------------------------------------------------
# Gradient verification

def _loss_with_signature(model: FusionModel, Z, S, T, y):
    """Training loss plus the sign pattern of every rectifier input.

    The signature lets the gradient checker reject finite-difference probes
    that cross a ReLU kink, where central differences do not estimate the
    derivative of anything.
    """
    logits, cache = _forward_batch(model, Z, S, T)
    logp = _log_softmax(logits)
    n = y.shape[0]
    loss = -logp[np.arange(n), y].mean()
    parts = [a > 0 for a in cache.get("mlp_pre", [])[:-1]]
    if "se" in cache:
        parts.append(cache["se"][1] > 0)
    signature = tuple(np.packbits(p.ravel()).tobytes() for p in parts)
    return loss, signature


def gradient_check(model: FusionModel, bundles, step: float = 1e-3,
                   coords_per_tensor: int = 20, seed: int = 0,
                   grad_perturbation: float = 0.0) -> float:
    """Max relative error between analytic and central-difference gradients.

    Checks up to coords_per_tensor coordinates per parameter tensor,
    skipping probe points whose rectifier activation pattern differs
    between the +step and -step evaluations (the loss is piecewise there,
    so the difference quotient is meaningless). grad_perturbation
    deliberately corrupts the analytic gradients; it exists so tests can
    prove the checker notices a wrong backward pass.
    """
    if isinstance(bundles, FeatureBundle):
        bundles = [bundles]
    Z, S, T, y = _bundle_arrays(model, bundles, need_labels=True)
    _, grads = _loss_and_grads(model, Z, S, T, y)

    rng = np.random.default_rng([seed, 0xFD])
    worst = 0.0
    for name, tensor in model.params.items():
        flat = tensor.reshape(-1)
        candidates = rng.permutation(flat.size)
        checked = 0
        for c in candidates:
            if checked >= coords_per_tensor:
                break
            original = flat[c]
            flat[c] = original + step
            up, sig_up = _loss_with_signature(model, Z, S, T, y)
            flat[c] = original - step
            down, sig_down = _loss_with_signature(model, Z, S, T, y)
            flat[c] = original
            if sig_up != sig_down:
                continue
            checked += 1
            numeric = (up - down) / (2 * step)
            analytic = grads[name].reshape(-1)[c] + grad_perturbation
            denom = max(abs(analytic), abs(numeric), 1e-6)
            worst = max(worst, abs(analytic - numeric) / denom)
    return worst


def analytic_gradients(model: FusionModel, bundles) -> dict[str, np.ndarray]:
    if isinstance(bundles, FeatureBundle):
        bundles = [bundles]
    Z, S, T, y = _bundle_arrays(model, bundles, need_labels=True)
    return _loss_and_grads(model, Z, S, T, y)[1]


# ---------------------------------------------------------------------------
# Persistence

def save_model(model: FusionModel, path) -> None:
    nn.save_tensor_map(path, model.params, {
        "kind": "fusion-model",
        "format_version": MODEL_FORMAT_VERSION,
        "mask": sorted(model.mask),
        "channels": model.channels,
        "vocab_size": model.vocab_size,
        "mlp_widths": list(MLP_WIDTHS),
        "config_fingerprint": model.config_fingerprint,
    })


def load_model(path, expected_channels: int | None = None,
               expected_vocab: int | None = None) -> FusionModel:
    """Load a model file, verifying schema version and declared widths."""
    tensors, meta = nn.load_tensor_map(path)
    if meta.get("kind") != "fusion-model":
        raise CompatibilityError(f"{path}: not a fusion model file")
    if meta.get("format_version") != MODEL_FORMAT_VERSION:
        raise CompatibilityError(
            f"{path}: format version {meta.get('format_version')} unsupported "
            f"(expected {MODEL_FORMAT_VERSION})")
    if tuple(meta.get("mlp_widths", ())) != MLP_WIDTHS:
        raise CompatibilityError(f"{path}: MLP widths {meta.get('mlp_widths')} do not match {MLP_WIDTHS}")
    channels = int(meta["channels"])
    vocab_size = int(meta["vocab_size"])
    if expected_channels is not None and channels != expected_channels:
        raise CompatibilityError(f"{path}: model has C={channels}, expected C={expected_channels}")
    if expected_vocab is not None and vocab_size != expected_vocab:
        raise CompatibilityError(f"{path}: model has V={vocab_size}, expected V={expected_vocab}")
    mask = normalize_mask(meta["mask"])
    if "dvfe" in mask and "se.w1" not in tensors:
        raise CompatibilityError(f"{path}: deep branch enabled but SE tensors are missing")
    se_hidden = tensors["se.w1"].shape[0] if "dvfe" in mask else 0
    expected = _param_shapes(mask, channels, vocab_size, se_hidden)
    for name, shape in expected.items():
        if name not in tensors:
            raise CompatibilityError(f"{path}: missing tensor {name!r}")
        if tuple(tensors[name].shape) != shape:
            raise CompatibilityError(
                f"{path}: tensor {name!r} has shape {tuple(tensors[name].shape)}, expected {shape}")
    extra = set(tensors) - set(expected)
    if extra:
        raise CompatibilityError(f"{path}: unexpected tensors {sorted(extra)}")
    params = {name: tensors[name].astype(np.float64) for name in expected}
    return FusionModel(mask=mask, channels=channels, vocab_size=vocab_size, params=params,
                       config_fingerprint=meta.get("config_fingerprint"))
