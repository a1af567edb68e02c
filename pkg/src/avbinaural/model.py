"""Visually conditioned U-Net that predicts the left-minus-right spectrogram.

Pipeline: image encoder -> audio encoder (contracting path) -> cross-attention at
the bottleneck (audio queries, visual keys/values) -> decoder whose every stage
normalises with an audio-visual adaptive de-normalisation layer -> tanh mask
applied to the mono spectrogram as a complex product.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .nn import BatchNorm2d, Conv2d, Linear, Module

PIXEL_MEAN = 0.5
PIXEL_STD = 0.25


@dataclass
class ModelConfig:
    image_channels: list[int] = field(default_factory=lambda: [32, 64, 128, 256])
    image_strides: list[int] = field(default_factory=lambda: [4, 2, 2, 1])  # patch size = stride
    audio_unet_channels: list[int] = field(default_factory=lambda: [32, 64, 128, 256, 512])
    attention_heads: int = 4
    attention_dim: int = 256
    avad_hidden_dim: int = 128
    input_freq_bins: int = 256
    input_frames: int = 64
    image_height: int = 224
    image_width: int = 448
    leaky_slope: float = 0.2
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5

    def __post_init__(self):
        if self.attention_dim % self.attention_heads:
            raise ValueError(
                f"attention_dim {self.attention_dim} not divisible by {self.attention_heads} heads"
            )
        stride_a = 2 ** len(self.audio_unet_channels)
        if self.input_freq_bins % stride_a or self.input_frames % stride_a:
            raise ValueError(f"spectrogram {self.input_freq_bins}x{self.input_frames} not divisible by {stride_a}")
        if len(self.image_strides) != len(self.image_channels):
            raise ValueError("image_strides and image_channels must have the same length")
        stride_v = int(np.prod(self.image_strides))
        if self.image_height % stride_v or self.image_width % stride_v:
            raise ValueError(f"image {self.image_height}x{self.image_width} not divisible by {stride_v}")

    @property
    def visual_grid(self) -> tuple[int, int]:
        s = int(np.prod(self.image_strides))
        return self.image_height // s, self.image_width // s

    def to_dict(self) -> dict:
        return asdict(self)

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    @classmethod
    def desk(cls) -> "ModelConfig":
        """Halved channel widths used for laptop-scale runs."""
        return cls(
            image_channels=[16, 32, 64, 128],
            image_strides=[4, 2, 2, 1],
            audio_unet_channels=[16, 32, 64, 128, 256],
            attention_heads=4,
            attention_dim=128,
            avad_hidden_dim=64,
        )


def preprocess_frames(frames: np.ndarray, dtype=np.float32) -> np.ndarray:
    """uint8 (B, H, W, 3) -> normalised float (B, 3, H, W)."""
    dtype = np.dtype(dtype).type
    x = np.asarray(frames, dtype=dtype) / dtype(255.0)
    x = (x - dtype(PIXEL_MEAN)) / dtype(PIXEL_STD)
    return np.ascontiguousarray(x.transpose(0, 3, 1, 2))


def spec_to_input(mono: np.ndarray, freq_bins: int, dtype=np.float32) -> np.ndarray:
    """Complex (B, F, T) -> real (B, 2, freq_bins, T) with the top bins cropped."""
    crop = np.asarray(mono)[:, :freq_bins, :]
    return np.stack([crop.real, crop.imag], axis=1).astype(dtype)


class ImageEncoder(Module):
    def __init__(self, cfg: ModelConfig, rng, dtype):
        chans = [3] + list(cfg.image_channels)
        # non-overlapping patches: kernel == stride, so each stage is space-to-depth + GEMM
        self.convs = [
            Conv2d(chans[i], chans[i + 1], s, s, 0, rng=rng, bias=False, dtype=dtype) for i, s in enumerate(cfg.image_strides)
        ]
        self.norms = [
            BatchNorm2d(c, momentum=cfg.bn_momentum, eps=cfg.bn_eps, dtype=dtype) for c in cfg.image_channels
        ]

    def __call__(self, x: Tensor) -> Tensor:
        for conv, bn in zip(self.convs, self.norms):
            x = ad.relu(bn(conv(x)))
        return x


class AudioEncoder(Module):
    """Contracting path; returns the bottleneck and the input of every stage as skips."""

    def __init__(self, cfg: ModelConfig, rng, dtype):
        chans = [2] + list(cfg.audio_unet_channels)
        self.convs = [
            Conv2d(chans[i], chans[i + 1], 4, 2, 1, rng=rng, bias=False, dtype=dtype) for i in range(len(chans) - 1)
        ]
        self.norms = [
            BatchNorm2d(c, momentum=cfg.bn_momentum, eps=cfg.bn_eps, dtype=dtype) for c in cfg.audio_unet_channels
        ]
        self.slope = cfg.leaky_slope

    def __call__(self, x: Tensor) -> tuple[Tensor, list[Tensor]]:
        skips = []
        for conv, bn in zip(self.convs, self.norms):
            skips.append(x)
            x = ad.leaky_relu(bn(conv(x)), self.slope)
        return x, skips


class CrossAttention(Module):
    """Multi-head attention with audio queries and visual keys/values, plus residual."""

    def __init__(self, audio_ch, visual_ch, dim, heads, rng, dtype):
        self.q = Linear(audio_ch, dim, rng=rng, dtype=dtype)
        # a key bias shifts every logit of a query equally and cancels in the softmax
        self.k = Linear(visual_ch, dim, rng=rng, bias=False, dtype=dtype)
        self.v = Linear(visual_ch, dim, rng=rng, dtype=dtype)
        self.out = Linear(dim, audio_ch, rng=rng, dtype=dtype)
        self.heads, self.dim = heads, dim
        self.last_weights: np.ndarray | None = None

    def __call__(self, ua: Tensor, uv: Tensor) -> Tensor:
        B, Ca, Fa, Ta = ua.shape
        Bv, Cv, Hv, Wv = uv.shape
        if B != Bv:
            raise ShapeError(f"cross_attention: batch {B} vs {Bv}")
        if Ca != self.q.weight.shape[0] or Cv != self.k.weight.shape[0]:
            raise ShapeError(
                f"cross_attention: got audio {Ca} / visual {Cv} channels, "
                f"expected {self.q.weight.shape[0]} / {self.k.weight.shape[0]}"
            )
        h, dh = self.heads, self.dim // self.heads
        Q, S = Fa * Ta, Hv * Wv
        a_tok = ua.reshape(B, Ca, Q).permute(0, 2, 1)
        v_tok = uv.reshape(B, Cv, S).permute(0, 2, 1)
        q = self.q(a_tok).reshape(B, Q, h, dh).permute(0, 2, 1, 3)
        k = self.k(v_tok).reshape(B, S, h, dh).permute(0, 2, 3, 1)
        v = self.v(v_tok).reshape(B, S, h, dh).permute(0, 2, 1, 3)
        w = ad.softmax(ad.scale(q @ k, 1.0 / np.sqrt(dh)), axis=-1)
        self.last_weights = w.data
        att = (w @ v).permute(0, 2, 1, 3).reshape(B, Q, self.dim)
        out = self.out(att).permute(0, 2, 1).reshape(B, Ca, Fa, Ta)
        return ad.add(ua, out)


class AVAD(Module):
    """Audio-visual adaptive de-normalisation: ``(1 + alpha) * BN(x) + beta``.

    alpha and beta are predicted per audio position from that position's
    relevance vector ``c[q, :] = BN(x)[:, q] . (proj(u_v) + pos)[:, s]`` through a
    shared MLP and two linear heads (zero-initialised, so the layer starts as BN).
    """

    def __init__(self, channels, visual_ch, grid, hidden, rng, dtype, momentum=0.1, eps=1e-5):
        hv, wv = grid
        self.norm = BatchNorm2d(channels, affine=False, momentum=momentum, eps=eps, dtype=dtype)
        self.proj = Linear(visual_ch, channels, rng=rng, dtype=dtype)
        self.pos = Tensor((0.02 * rng.standard_normal((channels, hv * wv))).astype(dtype), requires_grad=True)
        self.shared = Linear(hv * wv, hidden, rng=rng, dtype=dtype)
        self.alpha = Linear(hidden, channels, rng=rng, zero=True, dtype=dtype)
        self.beta = Linear(hidden, channels, rng=rng, zero=True, dtype=dtype)
        self.channels = channels
        self._cache: tuple[np.ndarray, np.ndarray] | None = None

    def visual_keys(self, uv: Tensor) -> Tensor:
        B, Cv, Hv, Wv = uv.shape
        if Hv * Wv != self.pos.shape[1]:
            raise ShapeError(f"avad: visual grid {Hv}x{Wv} does not match positional embedding {self.pos.shape}")
        tok = uv.reshape(B, Cv, Hv * Wv).permute(0, 2, 1)
        return ad.add(self.proj(tok).permute(0, 2, 1), self.pos)  # B, C, S

    def __call__(self, x: Tensor, uv: Tensor, explicit: bool = False) -> Tensor:
        B, C, Fk, Tk = x.shape
        if C != self.channels:
            raise ShapeError(f"avad: audio feature has {C} channels, layer expects {self.channels}")
        n = self.norm(x)
        vk = self.visual_keys(uv)
        nq = n.reshape(B, C, Fk * Tk).permute(0, 2, 1)  # B, Q, C
        self._cache = (nq.data, vk.data)
        if explicit:
            pre = ad.matmul(ad.matmul(nq, vk), self.shared.weight)
        else:
            # (n^T v) W == n^T (v W): same affine map, without the Q x S relevance matrix
            pre = ad.matmul(nq, ad.matmul(vk, self.shared.weight))
        hidden = ad.relu(ad.add(pre, self.shared.bias))
        alpha = self.alpha(hidden).permute(0, 2, 1).reshape(B, C, Fk, Tk)
        beta = self.beta(hidden).permute(0, 2, 1).reshape(B, C, Fk, Tk)
        return ad.add(ad.mul(n, ad.add(alpha, 1.0)), beta)

    @property
    def relevance(self) -> np.ndarray | None:
        """Relevance map (B, audio positions, visual positions) of the last call."""
        if self._cache is None:
            return None
        nq, vk = self._cache
        return nq @ vk


class DecoderStage(Module):
    """upsample x2 -> 3x3 conv -> AVAD -> leaky ReLU -> concat skip."""

    def __init__(self, cin, cout, visual_ch, grid, cfg: ModelConfig, rng, dtype):
        self.conv = Conv2d(cin, cout, 3, 1, 1, rng=rng, bias=False, dtype=dtype)
        self.avad = AVAD(cout, visual_ch, grid, cfg.avad_hidden_dim, rng, dtype, cfg.bn_momentum, cfg.bn_eps)
        self.slope = cfg.leaky_slope

    def __call__(self, x: Tensor, skip: Tensor, uv: Tensor, use_avad: bool = True) -> Tensor:
        y = ad.upsample_conv3x3(x, self.conv.weight, self.conv.bias)
        if skip.shape[0] != y.shape[0] or skip.shape[2:] != y.shape[2:]:
            raise ShapeError(f"decode: skip {skip.shape} does not match upsampled feature {y.shape}")
        y = self.avad(y, uv) if use_avad else self.avad.norm(y)
        return ad.concat([ad.leaky_relu(y, self.slope), skip], axis=1)


class BinauralUNet(Module):
    def __init__(self, cfg: ModelConfig | None = None, rng: np.random.Generator | None = None, dtype=np.float32):
        self.cfg = cfg = cfg or ModelConfig()
        rng = rng if rng is not None else np.random.default_rng(0)
        enc = list(cfg.audio_unet_channels)
        skip_ch = [2] + enc[:-1]
        cv = cfg.image_channels[-1]
        grid = cfg.visual_grid
        self.image_encoder = ImageEncoder(cfg, rng, dtype)
        self.audio_encoder = AudioEncoder(cfg, rng, dtype)
        self.attention = CrossAttention(enc[-1], cv, cfg.attention_dim, cfg.attention_heads, rng, dtype)
        depth = len(enc)
        stages = []
        prev = enc[-1]
        for k in range(depth):
            out = enc[depth - 2 - k] if k < depth - 1 else enc[0]
            stages.append(DecoderStage(prev, out, cv, grid, cfg, rng, dtype))
            prev = out + skip_ch[depth - 1 - k]
        self.decoder = stages
        self.head = Conv2d(prev, 2, 1, 1, 0, rng=rng, dtype=dtype)
        # zero mask at start: the untrained model is exactly the mono-mono predictor
        self.head.weight.data[...] = 0
        self.head.bias.data[...] = 0

    @property
    def dtype(self):
        return self.head.weight.dtype

    def param_groups(self) -> dict[str, list[Tensor]]:
        image = self.image_encoder.parameters()
        ids = {id(p) for p in image}
        return {"image": image, "audio": [p for p in self.parameters() if id(p) not in ids]}

    # -- components ---------------------------------------------------------

    def encode_image(self, frames: Tensor | np.ndarray) -> Tensor:
        frames = ad.as_tensor(frames)
        cfg = self.cfg
        if frames.ndim != 4 or frames.shape[1:] != (3, cfg.image_height, cfg.image_width):
            raise ShapeError(
                f"encode_image: expected (B, 3, {cfg.image_height}, {cfg.image_width}), got {frames.shape}"
            )
        return self.image_encoder(frames)

    def encode_audio(self, spec: Tensor | np.ndarray) -> tuple[Tensor, list[Tensor]]:
        spec = ad.as_tensor(spec)
        cfg = self.cfg
        if spec.ndim != 4 or spec.shape[1:] != (2, cfg.input_freq_bins, cfg.input_frames):
            raise ShapeError(
                f"encode_audio: expected (B, 2, {cfg.input_freq_bins}, {cfg.input_frames}), got {spec.shape}"
            )
        return self.audio_encoder(spec)

    def cross_attention(self, ua: Tensor, uv: Tensor) -> Tensor:
        return self.attention(ua, uv)

    def decode(self, fused: Tensor, skips: list[Tensor], uv: Tensor, use_avad: bool = True) -> Tensor:
        if len(skips) != len(self.decoder):
            raise ShapeError(f"decode: {len(skips)} skips for {len(self.decoder)} stages")
        x = fused
        for stage, skip in zip(self.decoder, reversed(skips)):
            x = stage(x, skip, uv, use_avad)
        return ad.tanh(self.head(x))

    # -- full forward -------------------------------------------------------

    def forward(self, mono: np.ndarray, frames: np.ndarray, use_avad: bool = True):
        """Returns (pred_re, pred_im, mask, fused, audio_features, visual_features).

        ``mono`` is complex (B, F, T); ``frames`` preprocessed float (B, 3, H, W).
        Predictions cover the cropped bins only.
        """
        x = spec_to_input(mono, self.cfg.input_freq_bins, self.dtype)
        ua, skips = self.encode_audio(x)
        uv = self.encode_image(frames.astype(self.dtype, copy=False))
        fused = self.cross_attention(ua, uv)
        mask = self.decode(fused, skips, uv, use_avad)
        pred_re, pred_im = apply_mask(mask, x)
        return pred_re, pred_im, mask, fused, ua, uv

    def predict_diff(self, mono: np.ndarray, frames: np.ndarray) -> np.ndarray:
        """Complex difference spectrogram with the same shape as ``mono``.

        Bins at and above ``input_freq_bins`` (the Nyquist bin for defaults) are 0.
        """
        with ad.no_grad():
            pred_re, pred_im, *_ = self.forward(mono, frames)
        out = np.zeros(np.shape(mono), dtype=np.complex128)
        out[:, : self.cfg.input_freq_bins, :] = pred_re.data + 1j * pred_im.data
        return out


def apply_mask(mask: Tensor, spec_input: np.ndarray) -> tuple[Tensor, Tensor]:
    """Complex product of a (B, 2, F, T) mask with the (real, imag) mono input."""
    m_re, m_im = mask[:, 0], mask[:, 1]
    a_re, a_im = spec_input[:, 0], spec_input[:, 1]
    pred_re = ad.sub(ad.mul(m_re, a_re), ad.mul(m_im, a_im))
    pred_im = ad.add(ad.mul(m_re, a_im), ad.mul(m_im, a_re))
    return pred_re, pred_im


def model_forward(model: BinauralUNet, mono: np.ndarray, frames: np.ndarray) -> np.ndarray:
    return model.predict_diff(mono, frames)
