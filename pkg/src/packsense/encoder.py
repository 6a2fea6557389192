"""Transformer encoder in plain numpy with hand-written backprop.

Architecture: token + learned positional embeddings, LayerNorm on the
embedding sum, then post-LN encoder blocks (multi-head self-attention with a
key-side padding mask, exact-erf GeLU feed-forward; LayerNorm after each
residual add). Two heads share the trunk:

  mlm  tied-embedding vocabulary head (logits = h @ E^T + b), evaluated only
       at masked positions; mean per-token negative log-softmax loss
  cls  masked mean pooling -> dense tanh -> 3-way softmax over region labels

Parameters are float32 for training; grad_check() recomputes everything in
float64 and compares analytic gradients against central finite differences.
Optimization is Adam with linear warmup over the first fraction of steps.

Checkpoints are a single file: magic "PALM", version, a JSON header (config,
vocabulary hash, head_trained flag, tensor index) and raw little-endian
float32 tensors. Loading verifies the vocabulary hash.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import dataclass, field, asdict

import numpy as np
from scipy.special import erf

from .normalizer import PAD, TokenWindow, build_vocabulary
from .simlm import (DegenerateWindow, IGNORE_ID, apply_mask, derive_mask_rng,
                    plan_mask)

N_CLASSES = 3
CHECKPOINT_MAGIC = b"PALM"
CHECKPOINT_VERSION = 1
NEG_INF = -1e9


class EmptyCorpus(ValueError):
    """No usable training windows."""


class NoTargets(ValueError):
    """A masked-loss batch contains no active target positions."""


class MissingLabels(ValueError):
    """A fine-tuning window lacks a region label."""


class UntrainedHead(RuntimeError):
    """Classifier head has not been fine-tuned."""


class VocabularyMismatch(ValueError):
    """Checkpoint was produced under a different vocabulary."""


class CorruptCheckpoint(ValueError):
    """Checkpoint bytes do not parse."""


@dataclass(frozen=True)
class EncoderConfig:
    n_layers: int = 4
    n_heads: int = 4
    d_model: int = 128
    d_ffn: int = 512
    max_seq: int = 512
    vocab_size: int = 0          # 0 = take from the built vocabulary
    dropout: float = 0.0

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")

    def resolved_vocab(self) -> int:
        return self.vocab_size or len(build_vocabulary())


@dataclass
class Hyper:
    epochs: int = 2
    batch_size: int = 8
    lr: float = 1e-4
    warmup_frac: float = 0.05
    seed: int = 0
    val_fraction: float = 0.1


def init_params(config: EncoderConfig, seed: int = 0) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(seed)
    d, f = config.d_model, config.d_ffn
    V = config.resolved_vocab()

    def w(*shape):
        return rng.normal(0.0, 0.02, size=shape).astype(np.float32)

    p: dict[str, np.ndarray] = {
        "tok_emb": w(V, d),
        "pos_emb": w(config.max_seq, d),
        "emb_ln_g": np.ones(d, dtype=np.float32),
        "emb_ln_b": np.zeros(d, dtype=np.float32),
        "mlm_b": np.zeros(V, dtype=np.float32),
        "pool_w": w(d, d),
        "pool_b": np.zeros(d, dtype=np.float32),
        "cls_w": w(d, N_CLASSES),
        "cls_b": np.zeros(N_CLASSES, dtype=np.float32),
    }
    for i in range(config.n_layers):
        for nm in ("wq", "wk", "wv", "wo"):
            p[f"l{i}.{nm}"] = w(d, d)
        for nm in ("bq", "bk", "bv", "bo"):
            p[f"l{i}.{nm}"] = np.zeros(d, dtype=np.float32)
        p[f"l{i}.ln1_g"] = np.ones(d, dtype=np.float32)
        p[f"l{i}.ln1_b"] = np.zeros(d, dtype=np.float32)
        p[f"l{i}.w1"] = w(d, f)
        p[f"l{i}.b1"] = np.zeros(f, dtype=np.float32)
        p[f"l{i}.w2"] = w(f, d)
        p[f"l{i}.b2"] = np.zeros(d, dtype=np.float32)
        p[f"l{i}.ln2_g"] = np.ones(d, dtype=np.float32)
        p[f"l{i}.ln2_b"] = np.zeros(d, dtype=np.float32)
    return p


# ---------------------------------------------------------------------------
# primitive forward/backward pairs

LN_EPS = 1e-5


def _ln_fwd(x, g, b):
    mu = x.mean(-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LN_EPS)
    xhat = xc * inv
    return xhat * g + b, (xhat, inv, g)


def _ln_bwd(dy, cache):
    xhat, inv, g = cache
    dg = (dy * xhat).sum(tuple(range(dy.ndim - 1)))
    db = dy.sum(tuple(range(dy.ndim - 1)))
    dxhat = dy * g
    m1 = dxhat.mean(-1, keepdims=True)
    m2 = (dxhat * xhat).mean(-1, keepdims=True)
    dx = inv * (dxhat - m1 - xhat * m2)
    return dx, dg, db


def _gelu_fwd(x):
    c = erf(x / np.sqrt(np.asarray(2.0, dtype=x.dtype)))
    y = 0.5 * x * (1.0 + c)
    return y, (x, c)


def _gelu_bwd(dy, cache):
    x, c = cache
    pdf = np.exp(-0.5 * x * x) / np.sqrt(np.asarray(2.0 * np.pi,
                                                    dtype=x.dtype))
    return dy * (0.5 * (1.0 + c) + x * pdf)


def _softmax_last(x):
    x = x - x.max(-1, keepdims=True)
    e = np.exp(x)
    return e / e.sum(-1, keepdims=True)


def _linear_fwd(x, w, b):
    return x @ w + b, x


def _linear_bwd(dy, x, w):
    din = x.shape[-1]
    dout = dy.shape[-1]
    dw = x.reshape(-1, din).T @ dy.reshape(-1, dout)
    db = dy.reshape(-1, dout).sum(0)
    dx = dy @ w.T
    return dx, dw, db


# ---------------------------------------------------------------------------
# trunk


def forward(ids: np.ndarray, mask: np.ndarray, params: dict,
            config: EncoderConfig):
    """ids (B,T) int32, mask (B,T) 1.0 for real tokens. Returns (hidden,
    cache). Dtype follows params."""
    dtype = params["tok_emb"].dtype
    B, T = ids.shape
    if T > config.max_seq:
        raise ValueError(f"sequence length {T} exceeds {config.max_seq}")
    mask = mask.astype(dtype)
    x0 = params["tok_emb"][ids] + params["pos_emb"][:T]
    x, emb_ln_cache = _ln_fwd(x0, params["emb_ln_g"], params["emb_ln_b"])

    h = config.n_heads
    dh = config.d_model // h
    scale = dtype.type(1.0 / math.sqrt(dh))
    attn_bias = ((1.0 - mask) * dtype.type(NEG_INF))[:, None, None, :]

    layer_caches = []
    for i in range(config.n_layers):
        pre = f"l{i}."
        q, xq = _linear_fwd(x, params[pre + "wq"], params[pre + "bq"])
        k, _ = _linear_fwd(x, params[pre + "wk"], params[pre + "bk"])
        v, _ = _linear_fwd(x, params[pre + "wv"], params[pre + "bv"])
        qh = q.reshape(B, T, h, dh).transpose(0, 2, 1, 3)
        kh = k.reshape(B, T, h, dh).transpose(0, 2, 1, 3)
        vh = v.reshape(B, T, h, dh).transpose(0, 2, 1, 3)
        scores = qh @ kh.transpose(0, 1, 3, 2) * scale + attn_bias
        probs = _softmax_last(scores)
        ctx = probs @ vh
        merged = ctx.transpose(0, 2, 1, 3).reshape(B, T, config.d_model)
        attn_out, xo = _linear_fwd(merged, params[pre + "wo"],
                                   params[pre + "bo"])
        y1, ln1_cache = _ln_fwd(x + attn_out, params[pre + "ln1_g"],
                                params[pre + "ln1_b"])
        h1, x1 = _linear_fwd(y1, params[pre + "w1"], params[pre + "b1"])
        g1, gelu_cache = _gelu_fwd(h1)
        ffn_out, xg = _linear_fwd(g1, params[pre + "w2"], params[pre + "b2"])
        y2, ln2_cache = _ln_fwd(y1 + ffn_out, params[pre + "ln2_g"],
                                params[pre + "ln2_b"])
        layer_caches.append({
            "x": x, "qh": qh, "kh": kh, "vh": vh, "probs": probs,
            "merged": merged, "ln1": ln1_cache, "y1": y1,
            "gelu": gelu_cache, "g1": g1, "ln2": ln2_cache,
        })
        x = y2
    cache = {"ids": ids, "mask": mask, "emb_ln": emb_ln_cache,
             "layers": layer_caches, "scale": scale, "shape": (B, T, h, dh)}
    return x, cache


def backward(dhidden: np.ndarray, cache: dict, params: dict,
             config: EncoderConfig) -> dict[str, np.ndarray]:
    """Gradients of all trunk parameters given dLoss/dhidden."""
    B, T, h, dh = cache["shape"]
    d = config.d_model
    scale = cache["scale"]
    grads: dict[str, np.ndarray] = {}
    dx = dhidden
    for i in reversed(range(config.n_layers)):
        pre = f"l{i}."
        lc = cache["layers"][i]
        dy2_in, dg, db = _ln_bwd(dx, lc["ln2"])
        grads[pre + "ln2_g"] = dg
        grads[pre + "ln2_b"] = db
        # dy2_in flows to (y1 + ffn_out)
        dffn = dy2_in
        dg1, dw2, db2 = _linear_bwd(dffn, lc["g1"], params[pre + "w2"])
        grads[pre + "w2"] = dw2
        grads[pre + "b2"] = db2
        dh1 = _gelu_bwd(dg1, lc["gelu"])
        dy1_ffn, dw1, db1 = _linear_bwd(dh1, lc["y1"], params[pre + "w1"])
        grads[pre + "w1"] = dw1
        grads[pre + "b1"] = db1
        dy1 = dy2_in + dy1_ffn
        dattn_in, dg, db = _ln_bwd(dy1, lc["ln1"])
        grads[pre + "ln1_g"] = dg
        grads[pre + "ln1_b"] = db
        # dattn_in flows to (x + attn_out)
        dmerged, dwo, dbo = _linear_bwd(dattn_in, lc["merged"],
                                        params[pre + "wo"])
        grads[pre + "wo"] = dwo
        grads[pre + "bo"] = dbo
        dctx = dmerged.reshape(B, T, h, dh).transpose(0, 2, 1, 3)
        probs = lc["probs"]
        dprobs = dctx @ lc["vh"].transpose(0, 1, 3, 2)
        dvh = probs.transpose(0, 1, 3, 2) @ dctx
        dscores = probs * (dprobs - (dprobs * probs).sum(-1, keepdims=True))
        dqh = dscores @ lc["kh"] * scale
        dkh = dscores.transpose(0, 1, 3, 2) @ lc["qh"] * scale
        dq = dqh.transpose(0, 2, 1, 3).reshape(B, T, d)
        dk = dkh.transpose(0, 2, 1, 3).reshape(B, T, d)
        dv = dvh.transpose(0, 2, 1, 3).reshape(B, T, d)
        x_in = lc["x"]
        dx_q, dwq, dbq = _linear_bwd(dq, x_in, params[pre + "wq"])
        dx_k, dwk, dbk = _linear_bwd(dk, x_in, params[pre + "wk"])
        dx_v, dwv, dbv = _linear_bwd(dv, x_in, params[pre + "wv"])
        grads[pre + "wq"], grads[pre + "bq"] = dwq, dbq
        grads[pre + "wk"], grads[pre + "bk"] = dwk, dbk
        grads[pre + "wv"], grads[pre + "bv"] = dwv, dbv
        dx = dattn_in + dx_q + dx_k + dx_v

    dx0, dg, db = _ln_bwd(dx, cache["emb_ln"])
    grads["emb_ln_g"] = dg
    grads["emb_ln_b"] = db
    V = params["tok_emb"].shape[0]
    dtok = np.zeros((V, d), dtype=dx0.dtype)
    np.add.at(dtok, cache["ids"].reshape(-1), dx0.reshape(-1, d))
    grads["tok_emb"] = dtok
    dpos = np.zeros_like(params["pos_emb"])
    dpos[:T] = dx0.sum(0)
    grads["pos_emb"] = dpos
    return grads


def _accum(grads: dict, extra: dict) -> dict:
    for k, v in extra.items():
        if k in grads:
            grads[k] = grads[k] + v
        else:
            grads[k] = v
    return grads


# ---------------------------------------------------------------------------
# heads


def mlm_loss_and_grads(params: dict, config: EncoderConfig, ids: np.ndarray,
                       mask: np.ndarray, targets: np.ndarray,
                       want_grads: bool = True):
    """targets (B,T) int32 with IGNORE_ID for inactive positions.

    Returns (loss, grads or None, aux) where aux carries masked-token
    accuracy. Logits are computed only at active positions; identical to a
    full softmax with an ignore mask.
    """
    hidden, cache = forward(ids, mask, params, config)
    B, T = ids.shape
    d = config.d_model
    flat_t = targets.reshape(-1)
    active = np.flatnonzero(flat_t != IGNORE_ID)
    if active.size == 0:
        raise NoTargets("no masked positions in batch")
    h_act = hidden.reshape(-1, d)[active]
    E = params["tok_emb"]
    logits = h_act @ E.T + params["mlm_b"]
    tgt = flat_t[active]
    logp = logits - logits.max(-1, keepdims=True)
    logp = logp - np.log(np.exp(logp).sum(-1, keepdims=True))
    n = active.size
    loss = float(-logp[np.arange(n), tgt].mean())
    acc = float((logits.argmax(-1) == tgt).mean())
    aux = {"masked_acc": acc, "n_active": int(n)}
    if not want_grads:
        return loss, None, aux

    probs = np.exp(logp)
    dlogits = probs
    dlogits[np.arange(n), tgt] -= 1.0
    dlogits /= n
    dh_act = dlogits @ E
    dE_head = dlogits.T @ h_act
    db = dlogits.sum(0)
    dhidden = np.zeros_like(hidden.reshape(-1, d))
    dhidden[active] = dh_act
    dhidden = dhidden.reshape(B, T, d)
    grads = backward(dhidden, cache, params, config)
    grads["tok_emb"] = grads["tok_emb"] + dE_head
    grads["mlm_b"] = db
    # heads not on this path get zero grads so Adam state stays aligned
    for nm in ("pool_w", "pool_b", "cls_w", "cls_b"):
        grads[nm] = np.zeros_like(params[nm])
    return loss, grads, aux


def _pool_fwd(hidden, mask, params):
    m = mask[..., None]
    counts = m.sum(1)
    pooled = (hidden * m).sum(1) / counts
    z, _ = _linear_fwd(pooled, params["pool_w"], params["pool_b"])
    a = np.tanh(z)
    logits, _ = _linear_fwd(a, params["cls_w"], params["cls_b"])
    return pooled, a, logits, counts


def cls_loss_and_grads(params: dict, config: EncoderConfig, ids: np.ndarray,
                       mask: np.ndarray, labels: np.ndarray,
                       want_grads: bool = True):
    hidden, cache = forward(ids, mask, params, config)
    B, T = ids.shape
    d = config.d_model
    m = cache["mask"]
    pooled, a, logits, counts = _pool_fwd(hidden, m, params)
    logp = logits - logits.max(-1, keepdims=True)
    logp = logp - np.log(np.exp(logp).sum(-1, keepdims=True))
    loss = float(-logp[np.arange(B), labels].mean())
    preds = logits.argmax(-1)
    aux = {"acc": float((preds == labels).mean()), "preds": preds,
           "probs": np.exp(logp)}
    if not want_grads:
        return loss, None, aux

    dlogits = np.exp(logp)
    dlogits[np.arange(B), labels] -= 1.0
    dlogits /= B
    da, dcls_w, dcls_b = _linear_bwd(dlogits, a, params["cls_w"])
    dz = da * (1.0 - a * a)
    dpooled, dpool_w, dpool_b = _linear_bwd(dz, pooled, params["pool_w"])
    dhidden = (dpooled[:, None, :] / counts[:, None, :]) * m[..., None]
    grads = backward(dhidden, cache, params, config)
    grads["cls_w"], grads["cls_b"] = dcls_w, dcls_b
    grads["pool_w"], grads["pool_b"] = dpool_w, dpool_b
    grads["mlm_b"] = np.zeros_like(params["mlm_b"])
    return loss, grads, aux


def classify_batch(params: dict, config: EncoderConfig, ids: np.ndarray,
                   mask: np.ndarray) -> np.ndarray:
    """Softmax probabilities (B, 3)."""
    hidden, _ = forward(ids, mask, params, config)
    _, _, logits, _ = _pool_fwd(hidden, mask.astype(hidden.dtype), params)
    return _softmax_last(logits)


# ---------------------------------------------------------------------------
# gradient check


def grad_check(params: dict, config: EncoderConfig, batch: dict,
               head: str = "mlm", eps: float = 1e-4,
               samples_per_tensor: int = 2, seed: int = 0) -> float:
    """Max relative error between analytic grads and central differences,
    all in float64. batch: {ids, mask, targets|labels}."""
    p64 = {k: v.astype(np.float64) for k, v in params.items()}
    rng = np.random.default_rng(seed)

    def loss_of(p):
        if head == "mlm":
            l, g, _ = mlm_loss_and_grads(p, config, batch["ids"],
                                         batch["mask"], batch["targets"],
                                         want_grads=g_flag)
        else:
            l, g, _ = cls_loss_and_grads(p, config, batch["ids"],
                                         batch["mask"], batch["labels"],
                                         want_grads=g_flag)
        return l, g

    g_flag = True
    _, grads = loss_of(p64)
    g_flag = False
    worst = 0.0
    for name in sorted(p64):
        tensor = p64[name]
        flat = tensor.reshape(-1)
        for _ in range(samples_per_tensor):
            idx = int(rng.integers(flat.size))
            orig = flat[idx]
            flat[idx] = orig + eps
            lp, _ = loss_of(p64)
            flat[idx] = orig - eps
            lm, _ = loss_of(p64)
            flat[idx] = orig
            numeric = (lp - lm) / (2 * eps)
            analytic = grads[name].reshape(-1)[idx]
            denom = max(abs(numeric), abs(analytic), 1e-6)
            worst = max(worst, abs(numeric - analytic) / denom)
    return worst


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0


def adam_init(params: dict) -> AdamState:
    return AdamState(m={k: np.zeros_like(v) for k, v in params.items()},
                     v={k: np.zeros_like(v) for k, v in params.items()})


def adam_step(params: dict, grads: dict, state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> None:
    state.t += 1
    t = state.t
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    for k, g in grads.items():
        g = g.astype(params[k].dtype)
        m = state.m[k]
        v = state.v[k]
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * (g * g)
        params[k] -= (lr * (m / bc1) /
                      (np.sqrt(v / bc2) + eps)).astype(params[k].dtype)


def warmup_lr(base_lr: float, step: int, total_steps: int,
              warmup_frac: float) -> float:
    """Linear warmup from 0 over the first warmup_frac of total steps."""
    warmup_steps = max(1, int(warmup_frac * total_steps))
    if step < warmup_steps:
        return base_lr * (step + 1) / warmup_steps
    return base_lr


# ---------------------------------------------------------------------------
# batching


def pad_batch(id_seqs: list[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    """Right-pad with [PAD]; returns (ids (B,T), mask (B,T) float32)."""
    maxlen = max(len(s) for s in id_seqs)
    B = len(id_seqs)
    ids = np.full((B, maxlen), PAD, dtype=np.int32)
    mask = np.zeros((B, maxlen), dtype=np.float32)
    for i, s in enumerate(id_seqs):
        ids[i, :len(s)] = s
        mask[i, :len(s)] = 1.0
    return ids, mask


# ---------------------------------------------------------------------------
# training loops


@dataclass
class TrainResult:
    params: dict[str, np.ndarray]
    config: EncoderConfig
    history: list[dict] = field(default_factory=list)
    head_trained: bool = False


def train_pretrain(windows: list[TokenWindow], config: EncoderConfig,
                   hyper: Hyper) -> TrainResult:
    """Masked-token pretraining with dynamic per-epoch masks."""
    if not windows:
        raise EmptyCorpus("no pretraining windows")
    params = init_params(config, seed=hyper.seed)
    state = adam_init(params)
    n = len(windows)
    steps_per_epoch = math.ceil(n / hyper.batch_size)
    total_steps = hyper.epochs * steps_per_epoch
    shuffle_rng = np.random.default_rng(
        np.random.SeedSequence([hyper.seed, 0xD1CE]))
    history = []
    for epoch in range(hyper.epochs):
        order = shuffle_rng.permutation(n)
        ep_loss = 0.0
        ep_acc = 0.0
        ep_batches = 0
        for lo in range(0, n, hyper.batch_size):
            batch_idx = order[lo:lo + hyper.batch_size]
            seqs = []
            tgts = []
            for wi in batch_idx:
                w = windows[int(wi)]
                try:
                    plan = plan_mask(w, derive_mask_rng(hyper.seed, epoch,
                                                        int(wi)))
                except DegenerateWindow:
                    continue
                masked = apply_mask(w, plan)
                seqs.append(masked.input_ids)
                tgts.append(masked.target_ids)
            if not seqs:
                continue
            ids, mask = pad_batch(seqs)
            targets = np.full(ids.shape, IGNORE_ID, dtype=np.int32)
            for i, t in enumerate(tgts):
                targets[i, :len(t)] = t
            loss, grads, aux = mlm_loss_and_grads(params, config, ids, mask,
                                                  targets)
            lr = warmup_lr(hyper.lr, state.t, total_steps, hyper.warmup_frac)
            adam_step(params, grads, state, lr)
            ep_loss += loss
            ep_acc += aux["masked_acc"]
            ep_batches += 1
        if ep_batches == 0:
            raise EmptyCorpus("every window was degenerate")
        history.append({"epoch": epoch, "loss": ep_loss / ep_batches,
                        "masked_acc": ep_acc / ep_batches,
                        "batches": ep_batches})
    return TrainResult(params=params, config=config, history=history,
                       head_trained=False)


def _macro_f1(preds: np.ndarray, labels: np.ndarray,
              n_classes: int = N_CLASSES) -> float:
    f1s = []
    for c in range(n_classes):
        tp = int(((preds == c) & (labels == c)).sum())
        fp = int(((preds == c) & (labels != c)).sum())
        fn = int(((preds != c) & (labels == c)).sum())
        if tp == 0 and (fp or fn):
            f1s.append(0.0)
        elif tp == 0:
            continue  # class absent entirely; skip
        else:
            f1s.append(2 * tp / (2 * tp + fp + fn))
    return float(np.mean(f1s)) if f1s else 0.0


def train_finetune(windows: list[TokenWindow], params: dict[str, np.ndarray],
                   config: EncoderConfig, hyper: Hyper) -> TrainResult:
    """Supervised window classification; trains trunk and head end-to-end."""
    if not windows:
        raise EmptyCorpus("no fine-tuning windows")
    for w in windows:
        if w.label is None:
            raise MissingLabels(f"window at {w.byte_start:#x} has no label")
    params = {k: v.copy() for k, v in params.items()}
    state = adam_init(params)
    n = len(windows)
    rng = np.random.default_rng(np.random.SeedSequence([hyper.seed, 0xF17E]))
    order0 = rng.permutation(n)
    n_val = min(max(1, int(hyper.val_fraction * n)), n - 1) if n > 1 else 0
    val_idx = order0[:n_val]
    train_idx = order0[n_val:]
    steps_per_epoch = math.ceil(len(train_idx) / hyper.batch_size)
    total_steps = hyper.epochs * steps_per_epoch
    history = []
    for epoch in range(hyper.epochs):
        order = rng.permutation(len(train_idx))
        ep_loss = 0.0
        ep_batches = 0
        for lo in range(0, len(train_idx), hyper.batch_size):
            chosen = train_idx[order[lo:lo + hyper.batch_size]]
            seqs = [windows[int(i)].ids for i in chosen]
            labels = np.asarray([windows[int(i)].label for i in chosen],
                                dtype=np.int64)
            ids, mask = pad_batch(seqs)
            loss, grads, _ = cls_loss_and_grads(params, config, ids, mask,
                                                labels)
            lr = warmup_lr(hyper.lr, state.t, total_steps, hyper.warmup_frac)
            adam_step(params, grads, state, lr)
            ep_loss += loss
            ep_batches += 1
        entry = {"epoch": epoch, "loss": ep_loss / max(ep_batches, 1)}
        if n_val:
            vp = []
            vl = []
            for lo in range(0, n_val, hyper.batch_size):
                chosen = val_idx[lo:lo + hyper.batch_size]
                seqs = [windows[int(i)].ids for i in chosen]
                ids, mask = pad_batch(seqs)
                probs = classify_batch(params, config, ids, mask)
                vp.append(probs.argmax(-1))
                vl.extend(int(windows[int(i)].label) for i in chosen)
            preds = np.concatenate(vp)
            labels = np.asarray(vl)
            entry["val_acc"] = float((preds == labels).mean())
            entry["val_f1"] = _macro_f1(preds, labels)
        history.append(entry)
    return TrainResult(params=params, config=config, history=history,
                       head_trained=True)


def classify_windows(windows: list[TokenWindow], params: dict,
                     config: EncoderConfig, head_trained: bool = True,
                     batch_size: int = 16) -> np.ndarray:
    """Probabilities (N, 3) for a list of windows."""
    if not head_trained:
        raise UntrainedHead("classifier head has not been fine-tuned")
    out = np.empty((len(windows), N_CLASSES), dtype=np.float64)
    for lo in range(0, len(windows), batch_size):
        chunk = windows[lo:lo + batch_size]
        ids, mask = pad_batch([w.ids for w in chunk])
        out[lo:lo + len(chunk)] = classify_batch(params, config, ids, mask)
    return out


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, params: dict[str, np.ndarray],
                    config: EncoderConfig, head_trained: bool,
                    extra: dict | None = None) -> str:
    """Writes the checkpoint; returns its sha256 hex digest."""
    names = sorted(params)
    index = []
    offset = 0
    for nm in names:
        arr = np.ascontiguousarray(params[nm], dtype=np.float32)
        index.append({"name": nm, "shape": list(arr.shape),
                      "dtype": "float32", "offset": offset})
        offset += arr.nbytes
    header = {
        "config": asdict(config),
        "vocab_sha256": build_vocabulary().sha256,
        "head_trained": bool(head_trained),
        "extra": extra or {},
        "tensors": index,
    }
    hjson = json.dumps(header, sort_keys=True).encode("utf-8")
    blob = bytearray()
    blob += CHECKPOINT_MAGIC
    blob += struct.pack("<I", CHECKPOINT_VERSION)
    blob += struct.pack("<Q", len(hjson))
    blob += hjson
    for nm in names:
        arr = np.ascontiguousarray(params[nm], dtype=np.float32)
        if arr.dtype.byteorder == ">":
            arr = arr.byteswap().view(arr.dtype.newbyteorder("<"))
        blob += arr.tobytes()
    data = bytes(blob)
    with open(path, "wb") as fh:
        fh.write(data)
    return hashlib.sha256(data).hexdigest()


def load_checkpoint(path, expect_vocab: bool = True):
    """Returns (params, config, header dict)."""
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != CHECKPOINT_MAGIC:
        raise CorruptCheckpoint("bad magic")
    version, = struct.unpack_from("<I", data, 4)
    if version != CHECKPOINT_VERSION:
        raise CorruptCheckpoint(f"unsupported version {version}")
    hlen, = struct.unpack_from("<Q", data, 8)
    try:
        header = json.loads(data[16:16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptCheckpoint(f"bad header: {exc}") from exc
    if expect_vocab and header["vocab_sha256"] != build_vocabulary().sha256:
        raise VocabularyMismatch(
            "checkpoint vocabulary hash does not match this build")
    payload = data[16 + hlen:]
    params = {}
    for ent in header["tensors"]:
        shape = tuple(ent["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = ent["offset"]
        arr = np.frombuffer(payload, dtype="<f4", count=count,
                            offset=start).reshape(shape)
        params[ent["name"]] = np.ascontiguousarray(arr, dtype=np.float32)
    config = EncoderConfig(**header["config"])
    return params, config, header
