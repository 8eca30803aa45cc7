"""The recognition adapter: a three-layer feed-forward network trained with
binary cross entropy on (perturbed) text embeddings and applied unchanged to
image embeddings.

Forward/backward passes are written out explicitly in float64 numpy so the
gradients can be checked against finite differences; the output layer is a
pure affine map into logits (ReLU there would floor every probability at 0.5,
see ``literal_output_activation``). Optimization is AdamW with decoupled
weight decay under a 1-cycle learning-rate schedule.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from .dataio import AdapterCheckpoint, InvalidConfigError, LabelVocab, records_dims
from .numkit import RandomSource
from .perturb import PerturbConfig, estimate_table, noise_batch, shift_text

MODES = ("zsl", "fsl", "pll")

# Probabilities are clipped to [EPS_CLIP, 1 - EPS_CLIP] before logs. The
# backward path uses the fused sigmoid/BCE form and needs no clipping.
EPS_CLIP = 1e-7


class ModeInputError(InvalidConfigError):
    """Training inputs do not match the requested mode."""


# ---------------------------------------------------------------------------
# Parameters


@dataclass
class AdapterParams:
    """Weights W_k (fan_in, fan_out) and biases b_k, float64, layer order."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]

    @property
    def layer_dims(self) -> tuple[int, ...]:
        return (self.weights[0].shape[0], *(w.shape[1] for w in self.weights))

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    @property
    def param_count(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def copy(self) -> "AdapterParams":
        return AdapterParams([w.copy() for w in self.weights], [b.copy() for b in self.biases])


def init_params(rng: RandomSource, d: int, hidden, n_labels: int) -> AdapterParams:
    """He-normal weights (std sqrt(2/fan_in)), zero biases, drawn layer by
    layer from the training stream."""
    dims = (int(d), *(int(h) for h in hidden), int(n_labels))
    if any(x < 1 for x in dims):
        raise InvalidConfigError(f"layer dims must be >= 1, got {dims}")
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        weights.append(rng.normal((fan_in, fan_out)) * math.sqrt(2.0 / fan_in))
        biases.append(np.zeros(fan_out))
    return AdapterParams(weights, biases)


def params_to_checkpoint(
    params: AdapterParams, dropout: float, vocab_hash: int, seed: int
) -> AdapterCheckpoint:
    dims = params.layer_dims
    return AdapterCheckpoint(
        d=dims[0],
        n_labels=dims[-1],
        hidden=dims[1:-1],
        dropout=float(dropout),
        vocab_hash=vocab_hash,
        seed=seed,
        weights=[w.astype(np.float32) for w in params.weights],
        biases=[b.astype(np.float32) for b in params.biases],
    )


def params_from_checkpoint(ckpt: AdapterCheckpoint) -> AdapterParams:
    return AdapterParams(
        [w.astype(np.float64) for w in ckpt.weights],
        [b.astype(np.float64) for b in ckpt.biases],
    )


# ---------------------------------------------------------------------------
# Forward / loss / backward


def sigmoid(z: np.ndarray) -> np.ndarray:
    """Numerically stable logistic function."""
    out = np.empty_like(z, dtype=np.float64)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def make_dropout_masks(rng: RandomSource, batch: int, params: AdapterParams, rate: float, include_output: bool = False):
    """Inverted-dropout masks per layer: keep with probability 1-rate, scale
    kept units by 1/(1-rate). None when rate is 0 (identity)."""
    if rate == 0.0:
        return None
    widths = params.layer_dims[1:] if include_output else params.layer_dims[1:-1]
    keep = 1.0 - rate
    return [(rng.uniform((batch, w)) >= rate) / keep for w in widths]


def forward(params: AdapterParams, x: np.ndarray, dropout_masks=None, literal_output: bool = False):
    """Logits plus the cached activations backward needs.

    Hidden layers apply affine -> ReLU -> dropout; the output layer is affine
    only. ``literal_output`` additionally applies ReLU (and a dropout mask if
    one is supplied for the output layer); it exists for comparison runs and
    floors probabilities at 0.5.

    Accepts a single vector or a (batch, d) matrix.
    """
    single = x.ndim == 1
    a = np.asarray(x, dtype=np.float64)
    if single:
        a = a[None, :]
    if a.shape[1] != params.layer_dims[0]:
        raise InvalidConfigError(f"input has dimension {a.shape[1]}, adapter expects {params.layer_dims[0]}")
    n_hidden = params.n_layers - 1
    cache = {"x": a, "z": [], "a": [], "masks": dropout_masks, "literal": literal_output}
    for k in range(n_hidden):
        z = a @ params.weights[k] + params.biases[k]
        h = np.maximum(z, 0.0)
        if dropout_masks is not None:
            h = h * dropout_masks[k]
        cache["z"].append(z)
        cache["a"].append(h)
        a = h
    logits = a @ params.weights[-1] + params.biases[-1]
    if literal_output:
        cache["z"].append(logits)
        logits = np.maximum(logits, 0.0)
        if dropout_masks is not None and len(dropout_masks) > n_hidden:
            logits = logits * dropout_masks[n_hidden]
    cache["logits"] = logits
    return (logits[0] if single else logits), cache


def bce_loss(p: np.ndarray, y: np.ndarray) -> float:
    """Mean binary cross entropy over labels (and over samples when batched);
    probabilities are clipped to [EPS_CLIP, 1 - EPS_CLIP] before the logs."""
    p = np.asarray(p, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if p.shape != y.shape:
        raise InvalidConfigError(f"shape mismatch: p {p.shape} vs y {y.shape}")
    pc = np.clip(p, EPS_CLIP, 1.0 - EPS_CLIP)
    return float(-np.mean(y * np.log(pc) + (1.0 - y) * np.log(1.0 - pc)))


def masked_bce_loss(p: np.ndarray, y: np.ndarray, known: np.ndarray) -> float:
    """BCE averaged over known labels only (partial annotations)."""
    p = np.clip(np.asarray(p, dtype=np.float64), EPS_CLIP, 1.0 - EPS_CLIP)
    y = np.asarray(y, dtype=np.float64)
    known = np.asarray(known, dtype=np.float64)
    per = -(y * np.log(p) + (1.0 - y) * np.log(1.0 - p)) * known
    counts = np.maximum(known.sum(axis=-1, keepdims=True), 1.0)
    return float(np.mean(per.sum(axis=-1, keepdims=True) / counts))


@dataclass
class Gradients:
    weights: list[np.ndarray]
    biases: list[np.ndarray]


def backward(params: AdapterParams, cache: dict, y: np.ndarray, known: np.ndarray | None = None) -> Gradients:
    """Exact gradients of the BCE loss through the cached forward pass.

    Uses the fused sigmoid/BCE signal (p - y) / N at the output, averaged
    over the batch. ``known`` masks unknown labels out of the loss (their
    signal becomes zero and each sample averages over its known count).
    """
    logits = cache["logits"]
    y = np.asarray(y, dtype=np.float64)
    if y.ndim == 1:
        y = y[None, :]
    if logits.shape != y.shape:
        raise InvalidConfigError(f"stale cache: logits {logits.shape} vs targets {y.shape}")
    batch, n_out = logits.shape
    p = sigmoid(logits)
    if known is None:
        delta = (p - y) / (n_out * batch)
    else:
        known = np.asarray(known, dtype=np.float64)
        counts = np.maximum(known.sum(axis=1, keepdims=True), 1.0)
        delta = known * (p - y) / (counts * batch)
    masks = cache["masks"]
    n_hidden = params.n_layers - 1
    if cache["literal"]:
        if masks is not None and len(masks) > n_hidden:
            delta = delta * masks[n_hidden]
        delta = delta * (cache["z"][n_hidden] > 0.0)
    grads_w = [np.empty(0)] * params.n_layers
    grads_b = [np.empty(0)] * params.n_layers
    for k in range(params.n_layers - 1, -1, -1):
        a_prev = cache["x"] if k == 0 else cache["a"][k - 1]
        grads_w[k] = a_prev.T @ delta
        grads_b[k] = delta.sum(axis=0)
        if k > 0:
            delta = delta @ params.weights[k].T
            if masks is not None:
                delta = delta * masks[k - 1]
            delta = delta * (cache["z"][k - 1] > 0.0)
    return Gradients(grads_w, grads_b)


# ---------------------------------------------------------------------------
# AdamW and the 1-cycle schedule


@dataclass(frozen=True)
class OptimizerConfig:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01


@dataclass
class AdamWState:
    m_w: list[np.ndarray]
    v_w: list[np.ndarray]
    m_b: list[np.ndarray]
    v_b: list[np.ndarray]
    step: int = 0

    @classmethod
    def zeros_like(cls, params: AdapterParams) -> "AdamWState":
        return cls(
            [np.zeros_like(w) for w in params.weights],
            [np.zeros_like(w) for w in params.weights],
            [np.zeros_like(b) for b in params.biases],
            [np.zeros_like(b) for b in params.biases],
        )


def adamw_step(params: AdapterParams, grads: Gradients, state: AdamWState, lr: float, cfg: OptimizerConfig) -> None:
    """One decoupled-weight-decay update, in place:
    theta <- theta - lr * m_hat / (sqrt(v_hat) + eps) - lr * lambda * theta.
    """
    state.step += 1
    t = state.step
    bc1 = 1.0 - cfg.beta1**t
    bc2 = 1.0 - cfg.beta2**t

    def update(theta, g, m, v):
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * g * g
        theta -= lr * (m / bc1) / (np.sqrt(v / bc2) + cfg.eps)
        if cfg.weight_decay:
            theta -= lr * cfg.weight_decay * theta

    for w, gw, m, v in zip(params.weights, grads.weights, state.m_w, state.v_w):
        update(w, gw, m, v)
    for b, gb, m, v in zip(params.biases, grads.biases, state.m_b, state.v_b):
        update(b, gb, m, v)


def onecycle_lr(
    step: int,
    total_steps: int,
    max_lr: float,
    warmup_frac: float = 0.3,
    start_div: float = 25.0,
    final_div: float = 1e4,
) -> float:
    """Cosine warmup from max_lr/start_div to max_lr over the first
    warmup_frac of steps, then cosine anneal to max_lr/final_div.

    The three anchor points (step 0, the warmup boundary, the final step) are
    returned exactly, not through the cosine formula.
    """
    if not 0 <= step < total_steps:
        raise InvalidConfigError(f"step {step} out of range [0, {total_steps})")
    if total_steps == 1:
        return max_lr
    boundary = min(max(int(round(warmup_frac * total_steps)), 0), total_steps - 1)
    if step == boundary:
        return max_lr
    if step < boundary:
        if step == 0:
            return max_lr / start_div
        lr0 = max_lr / start_div
        return lr0 + (max_lr - lr0) * 0.5 * (1.0 - math.cos(math.pi * step / boundary))
    if step == total_steps - 1:
        return max_lr / final_div
    lrf = max_lr / final_div
    span = total_steps - 1 - boundary
    return lrf + (max_lr - lrf) * 0.5 * (1.0 + math.cos(math.pi * (step - boundary) / span))


# ---------------------------------------------------------------------------
# Training


@dataclass(frozen=True)
class TrainConfig:
    """Hyperparameters for one training run. Defaults follow the reference
    operating point: 60 epochs, AdamW, batch 64, 1-cycle peaking at 1e-4."""

    mode: str = "zsl"
    epochs: int = 60
    batch_size: int = 64
    max_lr: float = 1e-4
    dropout: float = 0.5
    hidden: tuple[int, ...] | None = None  # None -> (d, d)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    perturb: PerturbConfig = field(default_factory=PerturbConfig)
    seed: int = 0
    literal_output_activation: bool = False
    # Extension: also feed partially annotated images to the loss (masked to
    # their known labels). Off by default; centroid estimation alone matches
    # the shifted-perturbation mechanism.
    pll_train_on_images: bool = False

    def __post_init__(self):
        if self.mode not in MODES:
            raise InvalidConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.epochs < 1:
            raise InvalidConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise InvalidConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if not 0.0 <= self.dropout < 1.0:
            raise InvalidConfigError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.max_lr <= 0:
            raise InvalidConfigError(f"max_lr must be > 0, got {self.max_lr}")


@dataclass
class TrainResult:
    checkpoint: AdapterCheckpoint
    log: list[dict]  # one {"epoch", "step", "lr", "loss"} entry per step
    summary: dict


def _prepare_inputs(text_records, vocab, cfg: TrainConfig, image_records):
    """Mode-specific assembly of the clean training arrays.

    Returns (x_text, y_text, text_radius, x_img, y_img, img_known) with the
    image triple empty unless the mode feeds images to the loss.
    """
    if not text_records:
        raise ModeInputError("training needs at least one text record")
    d, n = records_dims(text_records)
    if n != len(vocab):
        raise ModeInputError(f"text records have N={n}, vocab has {len(vocab)}")
    x_text = np.stack([r.vector for r in text_records]).astype(np.float64)
    marks_text = np.stack([r.marks for r in text_records])
    if np.any(marks_text < 0):
        raise ModeInputError("text records must carry full multi-hot annotations")
    if not np.any(marks_text > 0, axis=1).all():
        raise ModeInputError("every training text must have at least one positive label")
    y_text = (marks_text > 0).astype(np.float64)
    text_radius = cfg.perturb.radius

    x_img = np.zeros((0, d))
    y_img = np.zeros((0, n))
    img_known = None

    if cfg.mode == "zsl":
        if image_records:
            raise ModeInputError("zsl mode takes no image records")
    elif cfg.mode == "fsl":
        if image_records is None:
            raise ModeInputError("fsl mode requires image records (the n-shot set)")
        # An empty shot set is valid: mixed perturbation degenerates to plain
        # perturbation, drawing exactly the zsl stream.
        if image_records:
            di, ni = records_dims(image_records)
            if (di, ni) != (d, n):
                raise ModeInputError(f"image records have (d={di}, N={ni}), expected ({d}, {n})")
            marks_img = np.stack([r.marks for r in image_records])
            if np.any(marks_img < 0):
                raise ModeInputError("fsl image records must carry full multi-hot annotations")
            x_img = np.stack([r.vector for r in image_records]).astype(np.float64)
            y_img = (marks_img > 0).astype(np.float64)
    elif cfg.mode == "pll":
        if not image_records:
            raise ModeInputError("pll mode requires (partially annotated) image records")
        table = estimate_table(text_records, image_records, vocab)
        x_text = np.stack(
            [shift_text(x_text[i], r.marks, table.offsets) for i, r in enumerate(text_records)]
        )
        text_radius = cfg.perturb.shift_radius
        if cfg.pll_train_on_images:
            marks_img = np.stack([r.marks for r in image_records])
            x_img = np.stack([r.vector for r in image_records]).astype(np.float64)
            y_img = (marks_img > 0).astype(np.float64)
            img_known = (marks_img >= 0).astype(np.float64)
    return x_text, y_text, text_radius, x_img, y_img, img_known


def train(text_records, vocab: LabelVocab, cfg: TrainConfig, image_records=None) -> TrainResult:
    """Run the mode-aware training loop; deterministic per cfg.seed.

    Per epoch: fresh noise for every text (then every image) in store order,
    one shuffle permutation over the union, then batched steps; dropout masks
    are drawn per batch. All draws come from one stream, so replaying the
    config replays the run bit for bit.
    """
    t0 = time.monotonic()
    x_text, y_text, text_radius, x_img, y_img, img_known = _prepare_inputs(
        text_records, vocab, cfg, image_records
    )
    n_text, d = x_text.shape
    n_img = x_img.shape[0]
    n_train = n_text + n_img
    n_labels = y_text.shape[1]
    hidden = cfg.hidden if cfg.hidden is not None else (d, d)

    rng = RandomSource(cfg.seed)
    params = init_params(rng, d, hidden, n_labels)
    opt_state = AdamWState.zeros_like(params)
    n_batches = math.ceil(n_train / cfg.batch_size)
    total_steps = cfg.epochs * n_batches

    y_all = np.concatenate([y_text, y_img]) if n_img else y_text
    known_all = None
    if img_known is not None:
        known_all = np.concatenate([np.ones_like(y_text), img_known])

    log: list[dict] = []
    step = 0
    first_epoch_loss = last_epoch_loss = 0.0
    for epoch in range(cfg.epochs):
        xs = x_text + noise_batch(rng, n_text, d, text_radius, cfg.perturb.scheme)
        if n_img:
            xs = np.concatenate(
                [xs, x_img + noise_batch(rng, n_img, d, cfg.perturb.image_radius, cfg.perturb.scheme)]
            )
        perm = rng.permutation(n_train)
        epoch_loss = 0.0
        for b in range(n_batches):
            idx = perm[b * cfg.batch_size : (b + 1) * cfg.batch_size]
            lr = onecycle_lr(step, total_steps, cfg.max_lr)
            masks = make_dropout_masks(
                rng, idx.size, params, cfg.dropout, include_output=cfg.literal_output_activation
            )
            logits, cache = forward(params, xs[idx], masks, cfg.literal_output_activation)
            known = known_all[idx] if known_all is not None else None
            p = sigmoid(logits)
            loss = bce_loss(p, y_all[idx]) if known is None else masked_bce_loss(p, y_all[idx], known)
            grads = backward(params, cache, y_all[idx], known)
            adamw_step(params, grads, opt_state, lr, cfg.optimizer)
            log.append({"epoch": epoch, "step": step, "lr": lr, "loss": loss})
            epoch_loss += loss
            step += 1
        epoch_loss /= n_batches
        if epoch == 0:
            first_epoch_loss = epoch_loss
        last_epoch_loss = epoch_loss

    checkpoint = params_to_checkpoint(params, cfg.dropout, vocab.hash, cfg.seed)
    summary = {
        "mode": cfg.mode,
        "epochs": cfg.epochs,
        "steps": total_steps,
        "train_size": n_train,
        "wall_time_s": time.monotonic() - t0,
        "param_count": checkpoint.param_count,
        "seed": cfg.seed,
        "initial_epoch_loss": first_epoch_loss,
        "final_epoch_loss": last_epoch_loss,
    }
    return TrainResult(checkpoint, log, summary)


def predict(
    ckpt: AdapterCheckpoint,
    records,
    vocab: LabelVocab | None = None,
    literal_output: bool = False,
) -> list[tuple[str, np.ndarray]]:
    """Sigmoid label scores per record, order-preserving; dropout disabled.

    A pure function of (checkpoint, records): two calls yield identical
    scores.
    """
    if not records:
        return []
    d, n = records_dims(records)
    if d != ckpt.d or n != ckpt.n_labels:
        raise InvalidConfigError(
            f"store has (d={d}, N={n}), checkpoint expects (d={ckpt.d}, N={ckpt.n_labels})"
        )
    if vocab is not None and vocab.hash != ckpt.vocab_hash:
        raise InvalidConfigError(
            f"vocab hash {vocab.hash:#x} does not match checkpoint {ckpt.vocab_hash:#x}"
        )
    params = params_from_checkpoint(ckpt)
    x = np.stack([r.vector for r in records]).astype(np.float64)
    logits, _ = forward(params, x, dropout_masks=None, literal_output=literal_output)
    probs = sigmoid(logits)
    return [(r.source_id, probs[i]) for i, r in enumerate(records)]
