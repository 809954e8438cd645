"""Variance-preserving diffusion pieces shared by the toy denoiser.

Latents are plain ``(channels, height, width)`` float arrays. Timesteps are
1-based: ``t = 1`` is the least noisy level, ``t = T`` the noisiest. The
schedule is variance preserving, ``alpha_t^2 + sigma_t^2 = 1``, the forward
process is ``z_t = alpha_t * z0 + sigma_t * eps``, and networks predict the
velocity ``v = alpha_t * eps - sigma_t * z0``, from which both the clean
latent and the noise can be recovered in closed form.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

SCHEDULE_KINDS = ("scaled_linear", "cosine")

# The two geometry branches and the three scene layouts get one shared
# encoding table; codes map to distinct integer positions.
SWITCHER_CODES = ("depth", "normal")
SCENE_CODES = ("indoor", "outdoor", "object")
_CODE_INDEX = {"depth": 0, "normal": 1, "indoor": 2, "outdoor": 3, "object": 4}

DEFAULT_EMBED_DIM = 64


@dataclass
class NoiseSchedule:
    """Per-timestep (alpha, sigma) arrays; index 0 holds t = 1."""

    kind: str
    timesteps: int
    alpha: np.ndarray
    sigma: np.ndarray

    def __post_init__(self):
        if self.kind not in SCHEDULE_KINDS:
            raise ValueError(f"kind must be one of {SCHEDULE_KINDS}, got {self.kind!r}")
        self.alpha = np.asarray(self.alpha, dtype=np.float64)
        self.sigma = np.asarray(self.sigma, dtype=np.float64)
        if self.alpha.shape != (self.timesteps,) or self.sigma.shape != (self.timesteps,):
            raise ValueError("alpha/sigma must be 1-D arrays of length timesteps")
        vp = self.alpha**2 + self.sigma**2
        if np.max(np.abs(vp - 1.0)) > 1e-6:
            raise ValueError("schedule is not variance preserving: alpha^2 + sigma^2 != 1")
        if np.any(np.diff(self.alpha) > 0) or np.any(np.diff(self.sigma) < 0):
            raise ValueError("alpha must be non-increasing and sigma non-decreasing in t")

    def at(self, t) -> tuple[np.ndarray, np.ndarray]:
        """(alpha_t, sigma_t) for 1-based t (scalar or array)."""
        t = np.asarray(t)
        if np.any(t < 1) or np.any(t > self.timesteps):
            raise ValueError(f"t must lie in [1, {self.timesteps}]")
        return self.alpha[t - 1], self.sigma[t - 1]


def make_schedule(timesteps: int = 1000, kind: str = "scaled_linear") -> NoiseSchedule:
    """Build a variance-preserving schedule.

    ``scaled_linear`` spaces the square roots of the per-step betas linearly
    (beta from 8.5e-4 to 1.2e-2 over the default 1000 steps); ``cosine`` uses
    the squared-cosine cumulative schedule with the customary 0.008 offset.
    """
    if timesteps < 1:
        raise ValueError(f"timesteps must be >= 1, got {timesteps}")
    if kind == "scaled_linear":
        betas = np.linspace(np.sqrt(8.5e-4), np.sqrt(1.2e-2), timesteps) ** 2
        alpha_bar = np.cumprod(1.0 - betas)
    elif kind == "cosine":
        s = 0.008
        t = np.arange(1, timesteps + 1, dtype=np.float64)
        f = np.cos((t / timesteps + s) / (1 + s) * np.pi / 2) ** 2
        f0 = np.cos(s / (1 + s) * np.pi / 2) ** 2
        alpha_bar = np.clip(f / f0, 1e-12, 1.0)
        # guard against float non-monotonicity near the endpoints
        alpha_bar = np.minimum.accumulate(alpha_bar)
    else:
        raise ValueError(f"kind must be one of {SCHEDULE_KINDS}, got {kind!r}")
    alpha = np.sqrt(alpha_bar)
    sigma = np.sqrt(1.0 - alpha_bar)
    return NoiseSchedule(kind=kind, timesteps=timesteps, alpha=alpha, sigma=sigma)


def _broadcast_pair(z0, eps):
    z0 = np.asarray(z0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if z0.shape != eps.shape:
        raise ValueError(f"shape mismatch: {z0.shape} vs {eps.shape}")
    if not (np.all(np.isfinite(z0)) and np.all(np.isfinite(eps))):
        raise ValueError("latents and noise must be finite")
    return z0, eps


def forward_diffuse(z0: np.ndarray, eps: np.ndarray, t: int, schedule: NoiseSchedule) -> np.ndarray:
    """Noisy latent z_t = alpha_t * z0 + sigma_t * eps."""
    z0, eps = _broadcast_pair(z0, eps)
    a, s = schedule.at(t)
    return a * z0 + s * eps


def v_target(z0: np.ndarray, eps: np.ndarray, t: int, schedule: NoiseSchedule) -> np.ndarray:
    """Velocity target v = alpha_t * eps - sigma_t * z0."""
    z0, eps = _broadcast_pair(z0, eps)
    a, s = schedule.at(t)
    return a * eps - s * z0


def recover_from_v(
    z_t: np.ndarray, v: np.ndarray, t: int, schedule: NoiseSchedule
) -> tuple[np.ndarray, np.ndarray]:
    """Invert the v parameterization: returns (z0, eps).

    Under variance preservation, z0 = alpha_t * z_t - sigma_t * v and
    eps = sigma_t * z_t + alpha_t * v exactly.
    """
    z_t, v = _broadcast_pair(z_t, v)
    a, s = schedule.at(t)
    return a * z_t - s * v, s * z_t + a * v


def _bilinear_resize(field: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear upsampling with corner alignment; exact identity at equal size."""
    in_h, in_w = field.shape
    if (in_h, in_w) == (out_h, out_w):
        return field
    rows = np.linspace(0.0, in_h - 1.0, out_h) if out_h > 1 else np.zeros(1)
    cols = np.linspace(0.0, in_w - 1.0, out_w) if out_w > 1 else np.zeros(1)
    r0 = np.clip(np.floor(rows).astype(int), 0, max(in_h - 2, 0))
    c0 = np.clip(np.floor(cols).astype(int), 0, max(in_w - 2, 0))
    fr = (rows - r0)[:, None]
    fc = (cols - c0)[None, :]
    r1 = np.minimum(r0 + 1, in_h - 1)
    c1 = np.minimum(c0 + 1, in_w - 1)
    top = field[np.ix_(r0, c0)] * (1 - fc) + field[np.ix_(r0, c1)] * fc
    bot = field[np.ix_(r1, c0)] * (1 - fc) + field[np.ix_(r1, c1)] * fc
    return top * (1 - fr) + bot * fr


def multires_noise(
    shape: tuple[int, int, int],
    levels: int = 4,
    decay: float = 0.5,
    rng: np.random.Generator | int | None = None,
) -> np.ndarray:
    """Pyramid noise: Gaussian fields at halving resolutions, summed and rescaled.

    Level l draws standard Gaussian noise at spatial resolution
    ``ceil(H / 2^l) x ceil(W / 2^l)``, upsamples it bilinearly and adds it
    with weight ``decay^l``; the sum is rescaled to unit sample variance.
    With ``levels=1`` this is a plain Gaussian field (up to the rescale).
    Fully deterministic for a given seed or seeded generator.
    """
    if len(shape) != 3 or any(s < 1 for s in shape):
        raise ValueError(f"shape must be (channels, height, width) with positive sizes, got {shape}")
    if levels < 1:
        raise ValueError(f"levels must be >= 1, got {levels}")
    if not 0 < decay:
        raise ValueError(f"decay must be positive, got {decay}")
    c, h, w = shape
    if (h >> (levels - 1)) < 1 or (w >> (levels - 1)) < 1:
        raise ValueError(
            f"{levels} levels would shrink a {h}x{w} field below 1x1; reduce levels"
        )
    rng = np.random.default_rng(rng)

    out = np.zeros(shape)
    for level in range(levels):
        lh = -(-h // (1 << level))  # ceil division
        lw = -(-w // (1 << level))
        draw = rng.standard_normal((c, lh, lw))
        for ch in range(c):
            out[ch] += decay**level * _bilinear_resize(draw[ch], h, w)
    rms = float(np.sqrt(np.mean(out**2)))
    if rms == 0.0:
        return out
    return out / rms


def sinusoidal_embedding(position: float, dim: int = DEFAULT_EMBED_DIM) -> np.ndarray:
    """Interleaved sin/cos embedding of a scalar position.

    ``emb[2i] = sin(position / 10000^(2i/dim))``, ``emb[2i+1]`` the matching
    cosine, so position 0 encodes to [0, 1, 0, 1, ...].
    """
    if dim < 2 or dim % 2 != 0:
        raise ValueError(f"dim must be a positive even integer, got {dim}")
    if not np.isfinite(position):
        raise ValueError(f"position must be finite, got {position}")
    i = np.arange(dim // 2, dtype=np.float64)
    freqs = 1.0 / (10000.0 ** (2.0 * i / dim))
    emb = np.empty(dim)
    emb[0::2] = np.sin(position * freqs)
    emb[1::2] = np.cos(position * freqs)
    return emb


def positional_encode(code: str, dim: int = DEFAULT_EMBED_DIM) -> np.ndarray:
    """Embedding of a switcher or scene code via its fixed integer position."""
    if code not in _CODE_INDEX:
        raise ValueError(
            f"unknown conditioning code {code!r}; expected one of "
            f"{SWITCHER_CODES + SCENE_CODES}"
        )
    return sinusoidal_embedding(float(_CODE_INDEX[code]), dim)


def combine_conditioning(*embeddings: np.ndarray) -> np.ndarray:
    """Sum conditioning embeddings elementwise; dimensions must agree."""
    if not embeddings:
        raise ValueError("need at least one embedding")
    arrs = [np.asarray(e, dtype=np.float64) for e in embeddings]
    dim = arrs[0].shape
    for a in arrs[1:]:
        if a.shape != dim:
            raise ValueError(f"embedding dimension mismatch: {a.shape} vs {dim}")
    return np.sum(arrs, axis=0)


@dataclass
class AttentionWeights:
    """Square projection matrices for cross-domain attention."""

    q: np.ndarray
    k: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        self.q = np.asarray(self.q, dtype=np.float64)
        self.k = np.asarray(self.k, dtype=np.float64)
        self.v = np.asarray(self.v, dtype=np.float64)
        d = self.q.shape
        if len(d) != 2 or d[0] != d[1]:
            raise ValueError(f"q must be square, got {d}")
        if self.k.shape != d or self.v.shape != d:
            raise ValueError("q, k, v must share one square shape")
        for name, m in (("q", self.q), ("k", self.k), ("v", self.v)):
            if not np.all(np.isfinite(m)):
                raise ValueError(f"{name} contains non-finite values")


def softmax_rows(logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax, shifted for stability (invariant to constant offsets)."""
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def cross_domain_attention(
    z_d: np.ndarray,
    z_n: np.ndarray,
    weights: AttentionWeights,
    return_attention: bool = False,
):
    """Mutual attention between depth and normal token sequences.

    Each domain queries with its own tokens but attends over the
    concatenation of both domains' tokens (its own first), so the two
    branches exchange information symmetrically:

        feat_d = softmax(q_d k_d^T / sqrt(D)) v_d,  k_d, v_d from [z_d; z_n]
        feat_n = softmax(q_n k_n^T / sqrt(D)) v_n,  k_n, v_n from [z_n; z_d]

    Tokens are rows of (N, D) arrays. With identical inputs the two outputs
    are identical. Optionally also returns the two (N, 2N) attention maps.
    """
    z_d = np.asarray(z_d, dtype=np.float64)
    z_n = np.asarray(z_n, dtype=np.float64)
    if z_d.ndim != 2 or z_n.ndim != 2:
        raise ValueError("token arrays must be 2-D (tokens, dim)")
    if z_d.shape != z_n.shape:
        raise ValueError(f"token shape mismatch: {z_d.shape} vs {z_n.shape}")
    d = weights.q.shape[0]
    if z_d.shape[1] != d:
        raise ValueError(f"token dim {z_d.shape[1]} != weight dim {d}")
    if not (np.all(np.isfinite(z_d)) and np.all(np.isfinite(z_n))):
        raise ValueError("tokens must be finite")

    scale = 1.0 / np.sqrt(d)
    outs = []
    atts = []
    for own, other in ((z_d, z_n), (z_n, z_d)):
        joint = np.concatenate([own, other], axis=0)
        q = own @ weights.q.T
        k = joint @ weights.k.T
        v = joint @ weights.v.T
        att = softmax_rows((q @ k.T) * scale)
        outs.append(att @ v)
        atts.append(att)
    if return_attention:
        return outs[0], outs[1], atts[0], atts[1]
    return outs[0], outs[1]
