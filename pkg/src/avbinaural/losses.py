"""Reconstruction and spatial contrastive objectives."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor


@dataclass
class LossConfig:
    lam: float = 0.1  # contrastive weight
    zeta: float = 0.005  # magnitude weight
    eta: float = 1.0  # phase weight
    tau: float = 0.1  # temperature
    phase_floor: float = 1e-3  # phase bins below this fraction of max |gt| are ignored
    shuffle_grid: tuple[int, int] = (14, 28)

    def __post_init__(self):
        if min(self.lam, self.zeta, self.eta) < 0:
            raise ValueError("loss weights must be non-negative")
        if self.tau <= 0:
            raise ValueError(f"temperature must be positive, got {self.tau}")
        self.shuffle_grid = tuple(self.shuffle_grid)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["shuffle_grid"] = list(self.shuffle_grid)
        return d


def _as_pair(z) -> tuple[Tensor, Tensor]:
    """Accept a complex ndarray or a (real, imag) tensor pair."""
    if isinstance(z, tuple):
        return ad.as_tensor(z[0]), ad.as_tensor(z[1])
    z = np.asarray(z)
    return Tensor(np.ascontiguousarray(z.real)), Tensor(np.ascontiguousarray(z.imag))


def _check(name, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{name}: shape mismatch {a.shape} vs {b.shape}")


def _norm_const(shape) -> int:
    """L = F x T per item; leading axes count as a batch to average over."""
    return int(np.prod(shape[-2:])) * int(np.prod(shape[:-2]))


def loss_mse(gt, pred) -> Tensor:
    """(1/L) sum over real and imaginary parts of (gt - pred)^2."""
    g_re, g_im = _as_pair(gt)
    p_re, p_im = _as_pair(pred)
    _check("loss_mse", g_re, p_re)
    err = ad.add(ad.tsum(ad.square(ad.sub(g_re, p_re))), ad.tsum(ad.square(ad.sub(g_im, p_im))))
    return ad.scale(err, 1.0 / _norm_const(g_re.shape))


def loss_apm(gt, pred) -> Tensor:
    """(1/L) sum | |gt| - |pred| |."""
    g_re, g_im = _as_pair(gt)
    p_re, p_im = _as_pair(pred)
    _check("loss_apm", g_re, p_re)
    diff = ad.sub(ad.magnitude(g_re, g_im), ad.magnitude(p_re, p_im))
    return ad.scale(ad.tsum(ad.tabs(diff)), 1.0 / _norm_const(g_re.shape))


def phase_mask(gt_left, gt_right, floor: float = 1e-3) -> np.ndarray:
    """Bins whose ground-truth magnitude exceeds ``floor * max|gt|`` (per item, both channels)."""
    mags = [np.abs(np.asarray(g)) for g in (gt_left, gt_right)]
    axes = tuple(range(1, mags[0].ndim)) if mags[0].ndim > 2 else None
    peak = np.maximum(mags[0].max(axis=axes, keepdims=True), mags[1].max(axis=axes, keepdims=True))
    return np.stack([m > floor * peak for m in mags])


def loss_phs(gt_binaural, pred_binaural, floor: float = 1e-3) -> Tensor:
    """(1/L) sum over unmasked bins and both channels of wrap(angle(gt) - angle(pred))^2.

    ``gt_binaural`` is a (left, right) pair of complex arrays; ``pred_binaural`` a
    pair of complex arrays or of (real, imag) tensor pairs.
    """
    gl, gr = gt_binaural
    mask = phase_mask(gl, gr, floor)
    total = None
    L = None
    for ch, (g, p) in enumerate(zip((gl, gr), pred_binaural)):
        g_re, g_im = _as_pair(g)
        p_re, p_im = _as_pair(p)
        _check("loss_phs", g_re, p_re)
        L = _norm_const(g_re.shape)
        # wrapped angle(gt) - angle(pred) as the angle of gt * conj(pred): one
        # atan2 whose branch cut is the true kink at +-pi
        gr, gi = g_re.data.astype(p_re.dtype), g_im.data.astype(p_re.dtype)
        re = ad.add(ad.mul(p_re, gr), ad.mul(p_im, gi))
        im = ad.sub(ad.mul(p_re, gi), ad.mul(p_im, gr))
        d = ad.atan2(im, re)
        term = ad.tsum(ad.mul(ad.square(d), mask[ch].astype(p_re.dtype)))
        total = term if total is None else ad.add(total, term)
    return ad.scale(total, 1.0 / L)


def loss_rec(gt_diff, pred_diff, gt_binaural, pred_binaural, cfg: LossConfig) -> tuple[Tensor, dict]:
    """mse + zeta * apm + eta * phs; also returns the components as floats."""
    mse = loss_mse(gt_diff, pred_diff)
    total = mse
    parts = {"mse": float(mse.data), "apm": 0.0, "phs": 0.0}
    if cfg.zeta > 0:
        apm = loss_apm(gt_diff, pred_diff)
        parts["apm"] = float(apm.data)
        total = ad.add(total, ad.scale(apm, cfg.zeta))
    if cfg.eta > 0:
        phs = loss_phs(gt_binaural, pred_binaural, cfg.phase_floor)
        parts["phs"] = float(phs.data)
        total = ad.add(total, ad.scale(phs, cfg.eta))
    return total, parts


def combine_rec(mse: float, apm: float, phs: float, cfg: LossConfig) -> float:
    return mse + cfg.zeta * apm + cfg.eta * phs


# ---------------------------------------------------------------------------
# spatial contrastive learning
# ---------------------------------------------------------------------------


def spatial_shuffle(frame: np.ndarray, grid: tuple[int, int], rng: np.random.Generator, perm=None) -> np.ndarray:
    """Cut an (H, W, ...) image into rows x cols cells and permute the cells."""
    rows, cols = grid
    H, W = frame.shape[:2]
    if H % rows or W % cols:
        raise ValueError(f"spatial_shuffle: image {H}x{W} not divisible into a {rows}x{cols} grid")
    ch, cw = H // rows, W // cols
    rest = frame.shape[2:]
    cells = frame.reshape((rows, ch, cols, cw) + rest).swapaxes(1, 2).reshape((rows * cols, ch, cw) + rest)
    if perm is None:
        perm = rng.permutation(rows * cols)
    cells = cells[np.asarray(perm)]
    return cells.reshape((rows, cols, ch, cw) + rest).swapaxes(1, 2).reshape(frame.shape)


@dataclass
class ContrastiveBatch:
    anchors: Tensor  # (N, D), unit norm
    positives: Tensor  # (N, D)
    negatives: Tensor  # (N, D)

    @property
    def size(self) -> int:
        return self.anchors.shape[0]


def pooled_embedding(fused: Tensor) -> Tensor:
    """Global 2-D average pooling of a (N, C, F, T) map followed by L2 normalisation."""
    return ad.l2_normalize(ad.mean(fused, axis=(2, 3)), axis=-1)


def embed_sets(model, audio_feat: Tensor, fused_anchor: Tensor, visual_prev: Tensor, visual_neg: Tensor):
    """Anchor/positive/negative embeddings sharing one audio encoding."""
    return ContrastiveBatch(
        anchors=pooled_embedding(fused_anchor),
        positives=pooled_embedding(model.cross_attention(audio_feat, visual_prev)),
        negatives=pooled_embedding(model.cross_attention(audio_feat, visual_neg)),
    )


def build_contrastive_sets(model, mono, frames_t, frames_prev, rng, grid=(14, 28)) -> ContrastiveBatch:
    """Embeddings for a batch from raw inputs.

    ``frames_*`` are uint8 (N, H, W, 3) crops; negatives are spatially shuffled
    copies of ``frames_t``.
    """
    from .model import preprocess_frames, spec_to_input

    if len(frames_t) < 2:
        raise ValueError("contrastive batch needs at least two items")
    neg = np.stack([spatial_shuffle(f, grid, rng) for f in frames_t])
    n = len(frames_t)
    vis = model.encode_image(preprocess_frames(np.concatenate([frames_t, frames_prev, neg]), model.dtype))
    ua, _ = model.encode_audio(spec_to_input(mono, model.cfg.input_freq_bins, model.dtype))
    vt, vp, vn = vis[:n], vis[n : 2 * n], vis[2 * n :]
    return embed_sets(model, ua, model.cross_attention(ua, vt), vp, vn)


def loss_scl(cb: ContrastiveBatch, cfg: LossConfig) -> Tensor:
    """InfoNCE: each anchor against its positive and every shuffled negative."""
    if cfg.tau <= 0:
        raise ValueError(f"temperature must be positive, got {cfg.tau}")
    if cb.negatives.shape[0] < 1:
        raise ValueError("need at least one negative")
    n = cb.size
    pos = ad.tsum(ad.mul(cb.anchors, cb.positives), axis=1, keepdims=True)  # (N, 1)
    neg = ad.matmul(cb.anchors, ad.permute(cb.negatives, (1, 0)))  # (N, M)
    logits = ad.scale(ad.concat([pos, neg], axis=1), 1.0 / cfg.tau)
    logp = ad.log_softmax(logits, axis=1)
    return ad.scale(ad.tsum(logp[:, 0]), -1.0 / n)


def total_loss(rec, scl, cfg: LossConfig):
    """rec + lambda * scl (works on tensors or floats)."""
    if isinstance(rec, Tensor) or isinstance(scl, Tensor):
        return ad.add(rec, ad.scale(ad.as_tensor(scl), cfg.lam))
    return rec + cfg.lam * scl
